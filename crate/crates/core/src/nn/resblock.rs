use rand::Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::se::{Integration, SeUnit};
use crate::tensor::Scalar;

use super::{BatchNorm2d, Conv2d, Ctx, Module, Param};

/// SE unit wired into a block at a given position.
#[derive(Debug, Clone)]
pub struct SeAttachment<T: Scalar = f32> {
    pub integration: Integration,
    pub unit: SeUnit<T>,
}

/// Two 3×3 conv + BN layers with a skip connection.
///
/// The skip path is a strided 1×1 conv + BN whenever the block changes
/// resolution or width, the identity otherwise.
#[derive(Debug, Clone)]
pub struct BasicBlock<T: Scalar = f32> {
    name: String,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    pub se: Option<SeAttachment<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(&format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.down.bn"), out_ch),
            )
        });
        Self {
            name: name.to_string(),
            conv1,
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            conv2,
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            shortcut,
            se: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut v = vec![&self.bn1, &self.bn2];
        v.extend(self.shortcut.as_ref().map(|(_, bn)| bn));
        v
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        v.extend(self.shortcut.as_mut().map(|(_, bn)| bn));
        v
    }

    /// Returns the block output and the SE gates `[b, c]` when SE is attached.
    pub fn forward<'t>(
        &mut self,
        ctx: &mut Ctx<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let strategy = self.se.as_ref().map(|s| s.integration);
        let mut gates = None;
        let mut gate = |ctx: &mut Ctx<'t, T>, v: Var<'t, T>, se: &Option<SeAttachment<T>>| -> Result<Var<'t, T>> {
            let unit = &se.as_ref().expect("strategy implies unit").unit;
            let (out, g) = unit.forward(ctx, v)?;
            gates = Some(g);
            Ok(out)
        };

        let residual_in = match strategy {
            Some(Integration::Pre) => gate(ctx, x, &self.se)?,
            _ => x,
        };
        let h = self.conv1.forward(ctx, residual_in)?;
        let h = self.bn1.forward(ctx, h)?.relu();
        let h = self.conv2.forward(ctx, h)?;
        let mut h = self.bn2.forward(ctx, h)?;
        if strategy == Some(Integration::Standard) {
            h = gate(ctx, h, &self.se)?;
        }

        let mut skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        if strategy == Some(Integration::Identity) {
            skip = gate(ctx, skip, &self.se)?;
        }

        let mut out = h.add(skip)?.relu();
        if strategy == Some(Integration::Post) {
            out = gate(ctx, out, &self.se)?;
        }
        Ok((out, gates))
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        if let Some((c, b)) = &self.shortcut {
            v.extend(c.params());
            v.extend(b.params());
        }
        if let Some(se) = &self.se {
            v.extend(se.unit.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.shortcut {
            v.extend(c.params_mut());
            v.extend(b.params_mut());
        }
        if let Some(se) = &mut self.se {
            v.extend(se.unit.params_mut());
        }
        v
    }
}
