use super::gradcheck::{max_rel_error, op_suite};
use super::optim::{adam_step, cosine_lr, AdamConfig, AdamState, OptimError, LR_MAX, LR_MIN};
use super::params::{Grads, ParamStore, ParamTensor};
use super::*;

#[test]
fn every_op_passes_gradcheck() {
    for seed in 0..16 {
        for (name, err) in op_suite(seed).unwrap() {
            assert!(err < 1e-4, "{name} (seed {seed}): relative error {err}");
        }
    }
}

#[test]
fn softmax_of_uniform_row() {
    let x = Tensor::param(&[1, 3], vec![0.0; 3]).unwrap();
    let y = x.softmax(1).unwrap();
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    y.sum_all().backward().unwrap();
    assert!(x.grad().unwrap().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let x = Tensor::new(&[2, 4], vec![3.0; 8]).unwrap();
    let gain = Tensor::new(&[4], vec![1.0; 4]).unwrap();
    let bias = Tensor::zeros(&[4]);
    let y = x.layer_norm(&gain, &bias, 1e-5).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn shape_errors() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(a.add(&Tensor::zeros(&[3, 2])), Err(TensorError::ShapeMismatch { .. })));
    assert!(Tensor::new(&[2, 2], vec![1.0]).is_err());
    assert!(matches!(
        a.gather_rows(&[5]),
        Err(TensorError::IndexOutOfRange { .. })
    ));
}

#[test]
fn backward_requires_scalar() {
    let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        a.scale(2.0).backward(),
        Err(TensorError::BackwardOnNonScalar(_))
    ));
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x*x + x, dy/dx = 2x + 1
    let x = Tensor::param(&[1], vec![3.0]).unwrap();
    let y = x.mul(&x).unwrap().add(&x).unwrap();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![7.0]);
}

#[test]
fn detach_blocks_gradient() {
    let x = Tensor::param(&[1], vec![3.0]).unwrap();
    let y = x.detach().mul(&x).unwrap();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0]);
}

#[test]
fn composed_expression_gradcheck() {
    let ins = vec![
        (vec![3, 4], vec![0.3, -0.2, 0.5, 0.9, -0.7, 0.1, 0.4, -0.6, 0.8, -0.3, 0.2, 0.6]),
        (vec![4, 2], vec![0.5, -0.4, 0.3, 0.2, -0.9, 0.7, 0.1, -0.5]),
    ];
    let err = max_rel_error(&ins, |t| {
        let h = t[0].matmul(&t[1])?.sigmoid();
        let g = h.softmax(0)?;
        Tensor::concat(&[g, h.sin()], 1)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn scalar_store(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", ParamTensor::new(&[1], vec![value]).unwrap());
    s
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut s = scalar_store(0.7);
    let mut st = AdamState::default();
    let grads: Grads = [("w".to_string(), vec![0.0])].into();
    adam_step(&mut s, &grads, &mut st, 1e-3, AdamConfig::default()).unwrap();
    assert_eq!(s.get("w").unwrap().data, vec![0.7]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut s = scalar_store(1.0);
    let mut st = AdamState::default();
    let grads: Grads = [("w".to_string(), vec![1.0])].into();
    adam_step(&mut s, &grads, &mut st, 1e-3, AdamConfig::default()).unwrap();
    // m̂ = 1, v̂ = 1, step = lr / (1 + 1e-8)
    let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
    assert!((s.get("w").unwrap().data[0] - expected).abs() < 1e-15);
}

#[test]
fn adam_rejects_nan_and_names_parameter() {
    let mut s = scalar_store(1.0);
    s.insert("a", ParamTensor::zeros(&[2]));
    let before = s.clone();
    let mut st = AdamState::default();
    let grads: Grads = [
        ("a".to_string(), vec![0.1, 0.2]),
        ("w".to_string(), vec![f64::NAN]),
    ]
    .into();
    let err = adam_step(&mut s, &grads, &mut st, 1e-3, AdamConfig::default()).unwrap_err();
    assert_eq!(err, OptimError::NonFiniteGradient("w".into()));
    assert_eq!(s, before);
    assert_eq!(st.t, 0);
}

#[test]
fn cosine_schedule_endpoints() {
    assert!((cosine_lr(0, 100, LR_MAX, LR_MIN) - 1e-3).abs() < 1e-18);
    assert!((cosine_lr(100, 100, LR_MAX, LR_MIN) - 1e-5).abs() < 1e-18);
    assert!((cosine_lr(50, 100, LR_MAX, LR_MIN) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip() {
    let mut s = ParamStore::new();
    s.insert("b", ParamTensor::new(&[2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]).unwrap());
    s.insert("a", ParamTensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
    let meta = serde_json::json!({"schema": "flownet/1", "d": 8});
    let mut buf = Vec::new();
    ckpt::write_to(&mut buf, &s, &meta).unwrap();
    let (back, meta_back) = ckpt::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back, s);
    assert_eq!(meta_back, meta);
    assert!(matches!(
        ckpt::read_from(&mut &buf[..buf.len() - 3]),
        Err(ckpt::CkptError::Malformed(_)) | Err(ckpt::CkptError::Io(_))
    ));
    assert!(matches!(
        ckpt::read_from(&mut &b"nope"[..]),
        Err(ckpt::CkptError::BadMagic)
    ));
}

