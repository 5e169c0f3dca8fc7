use severif::autograd::{broadcast_shape, sum_to_shape, Tape, Var};
use severif::{Error, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn elementwise_examples() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, 4.0]));
    assert_eq!(a.add(b).unwrap().to_tensor().data(), &[4.0, 6.0]);

    let one = tape.constant(Tensor::scalar(1.0));
    assert_eq!(a.mul(one).unwrap().to_tensor().data(), &[1.0, 2.0]);

    let zero = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(a.div(zero), Err(Error::Numeric(_))));

    let s = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    assert_eq!(s.relu().to_tensor().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().to_tensor().item(), 0.5);
}

#[test]
fn matmul_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    assert_eq!(x.matmul(eye).unwrap().to_tensor(), x.to_tensor());

    let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(row.matmul(col).unwrap().to_tensor().data(), &[11.0]);

    assert!(matches!(x.matmul(row), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn log_softmax_is_stable_for_large_logits() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[1000.0, 1000.0]));
    let y = x.log_softmax(1).unwrap().to_tensor();
    for &v in y.data() {
        assert!((v + std::f64::consts::LN_2).abs() < 1e-12, "{v}");
    }
}

#[test]
fn gradient_of_sum_of_squares() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let c = tape.constant(t(&[2], &[5.0, 5.0]));
    let loss = x.square().add(c).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    assert!(c.grad().is_none());
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    assert!(tape.backward(x.square()).is_err());
}

#[test]
fn gradients_accumulate_over_reuse() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let loss = x.mul(x).unwrap().add(x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[3.0, -3.0, 2.0]);
}

#[test]
fn broadcast_rules() {
    assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
    assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
    assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    let g = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(sum_to_shape(&g, &[3]).data(), &[5.0, 7.0, 9.0]);
    assert_eq!(sum_to_shape(&g, &[2, 1]).data(), &[6.0, 15.0]);
}

#[test]
fn broadcast_backward_matches_explicit_tiling() {
    let a = t(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
    let b = t(&[3], &[2.0, -3.0, 0.5]);

    let tape = Tape::<f64>::new();
    let (va, vb) = (tape.leaf(a.clone(), true), tape.leaf(b.clone(), true));
    let loss = va.mul(vb).unwrap().div(va.add_scalar(5.0)).unwrap().sum();
    tape.backward(loss).unwrap();
    let gb = vb.grad().unwrap();

    let tiled = Tensor::from_fn(&[2, 3], |i| b.data()[i % 3]);
    let tape2 = Tape::<f64>::new();
    let (va2, vt) = (tape2.leaf(a, true), tape2.leaf(tiled, true));
    let loss2 = va2.mul(vt).unwrap().div(va2.add_scalar(5.0)).unwrap().sum();
    tape2.backward(loss2).unwrap();
    let gt = vt.grad().unwrap();

    for j in 0..3 {
        let expect = gt.data()[j] + gt.data()[3 + j];
        assert!((gb.data()[j] - expect).abs() < 1e-12);
    }
    assert_eq!(va.grad().unwrap(), va2.grad().unwrap());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_fn(&[4, 3], |i| (i as f32 * 0.37).sin()), true);
        let x = tape.constant(Tensor::from_fn(&[5, 4], |i| (i as f32 * 0.11).cos()));
        let logits = x.matmul(w).unwrap();
        let loss = logits.log_softmax(1).unwrap().pick(&[0, 1, 2, 0, 1]).unwrap().mean().neg();
        tape.backward(loss).unwrap();
        (loss.to_tensor(), w.grad().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn concat_and_row_statistics() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, -1.0, -1.0, -1.0]));
    let m = x.row_mean(4, &[2]).unwrap().to_tensor();
    assert_eq!(m.data(), &[2.5, -1.0]);
    let mx = x.row_max(4, &[2]).unwrap().to_tensor();
    assert_eq!(mx.data(), &[4.0, -1.0]);
    let sd = x.row_std(4, 0.0, &[2]).unwrap().to_tensor();
    assert!((sd.data()[0] - 1.25f64.sqrt()).abs() < 1e-12);
    assert_eq!(sd.data()[1], 0.0);

    let a = tape.constant(t(&[2, 1], &[7.0, 8.0]));
    let cat = Var::concat_cols(&[a, x]).unwrap().to_tensor();
    assert_eq!(cat.shape(), &[2, 5]);
    assert_eq!(cat.at(&[1, 0]), 8.0);
    assert_eq!(cat.at(&[0, 4]), 4.0);
}
