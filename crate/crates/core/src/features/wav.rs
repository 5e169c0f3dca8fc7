use std::path::Path;

use crate::error::{Error, Result};

use super::{AudioSegment, SAMPLE_RATE};

/// Reads 16-bit PCM mono 16 kHz WAV; any other format is rejected.
pub fn read_wav(path: &Path, speaker_id: &str, utterance_id: &str) -> Result<AudioSegment> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg,
    };
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| bad(format!("not a readable WAV file: {e}")))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(bad(format!(
            "unsupported sample format {:?}/{} bit; need 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(bad(format!("{} channels; need mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad(format!("{} Hz; need {SAMPLE_RATE} Hz (no resampling)", spec.sample_rate)));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("truncated sample data: {e}")))?;
    AudioSegment::new(samples, speaker_id, utterance_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, rate: u32, channels: u16, bits: u16) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for i in 0..1600 * channels as i32 {
            if bits == 16 {
                w.write_sample((i % 200 * 100) as i16).unwrap();
            } else {
                w.write_sample(i % 200 * 100 * 65536).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn accepts_only_16bit_mono_16k() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.wav");
        write(&ok, 16000, 1, 16);
        let a = read_wav(&ok, "spk", "utt").unwrap();
        assert_eq!(a.samples.len(), 1600);
        assert_eq!(a.samples[1], 100.0 / 32768.0);

        for (name, rate, ch, bits) in [("r.wav", 8000, 1, 16), ("c.wav", 16000, 2, 16), ("b.wav", 16000, 1, 32)] {
            let p = dir.path().join(name);
            write(&p, rate, ch, bits);
            assert!(matches!(read_wav(&p, "s", "u"), Err(Error::Format { .. })), "{name}");
        }
        assert!(matches!(read_wav(&dir.path().join("none.wav"), "s", "u"), Err(Error::Missing(_))));
    }
}
