use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xtra_core::alignment::ContentClassifier;
use xtra_core::numerics::layers::Linear;
use xtra_core::numerics::{finite_difference_check, ops, Matrix, Parameter};
use xtra_core::Mat;

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn isolate_linear_bce() {
    struct St {
        l: Linear<f32>,
        x: Mat,
        y: Mat,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_mat(5, 7, &mut rng);
    let y = Mat::from_vec(5, 3, (0..15).map(|i| (i % 2) as f32).collect()).unwrap();
    let mut st = St {
        l: Linear::new("l", 7, 3, &mut rng),
        x,
        y,
    };
    {
        let (logits, c) = st.l.forward(&st.x).unwrap();
        let probs = ops::sigmoid(&logits);
        let (_, dp) = ops::binary_cross_entropy(&probs, &st.y).unwrap();
        let dl = ops::sigmoid_backward(&probs, &dp).unwrap();
        st.l.backward(&c, &dl).unwrap();
    }
    let err = finite_difference_check(
        &mut st,
        |s| s.l.params_mut(),
        |s| {
            let l64 = s.l.convert::<f64>();
            let (logits, _) = l64.forward(&s.x.convert()).unwrap();
            let probs = ops::sigmoid(&logits);
            let y64: Matrix<f64> = s.y.convert();
            Ok(ops::binary_cross_entropy(&probs, &y64).unwrap().0)
        },
        1e-3,
        100,
        9,
    )
    .unwrap();
    assert!(err < 1e-3, "linear+sigmoid+bce rel err {err}");
}

#[test]
fn isolate_classifier_bce() {
    struct St {
        c: ContentClassifier<f32>,
        x: Mat,
        y: Mat,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_mat(6, 12, &mut rng);
    let y = Mat::from_vec(6, 14, (0..84).map(|i| ((i * 7) % 3 == 0) as u8 as f32).collect()).unwrap();
    let mut st = St {
        c: ContentClassifier::new(12, &mut rng),
        x,
        y,
    };
    {
        let (probs, cache) = st.c.forward(&st.x).unwrap();
        let (_, dp) = ops::binary_cross_entropy(&probs, &st.y).unwrap();
        st.c.backward(&cache, &dp).unwrap();
    }
    let err = finite_difference_check(
        &mut st,
        |s| s.c.params_mut(),
        |s| {
            let c64 = s.c.convert::<f64>();
            let (probs, _) = c64.forward(&s.x.convert()).unwrap();
            let y64: Matrix<f64> = s.y.convert();
            Ok(ops::binary_cross_entropy(&probs, &y64).unwrap().0)
        },
        1e-3,
        200,
        10,
    )
    .unwrap();
    assert!(err < 1e-3, "classifier+bce rel err {err}");
}

#[test]
fn isolate_mha_alone() {
    use xtra_core::augment::MhaBlock;
    struct St {
        b: MhaBlock<f32>,
        q: Mat,
        n: Mat,
        t: Mat,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = 8usize;
    let mut b = MhaBlock::new("b", z, 2, &mut rng).unwrap();
    b.w_out = Parameter::xavier("b.wo", z, z, &mut rng);
    let q = ops::l2_normalize_rows(&random_mat(1, z, &mut rng));
    let n = ops::l2_normalize_rows(&random_mat(5, z, &mut rng));
    let t = random_mat(1, z, &mut rng);
    let mut st = St { b, q, n, t };
    {
        // loss = sum((out - t)^2) / 2 -> d_out = out - t
        let (out, cache) = st.b.forward(&st.q, &st.n).unwrap();
        let d_out = out.sub(&st.t).unwrap();
        st.b.backward(&cache, &d_out).unwrap();
    }
    let err = finite_difference_check(
        &mut st,
        |s| s.b.params_mut(),
        |s| {
            let b64 = s.b.convert::<f64>();
            let (out, _) = b64.forward(&s.q.convert(), &s.n.convert()).unwrap();
            let d: Matrix<f64> = out.sub(&s.t.convert()).unwrap();
            Ok(0.5 * d.frob_sq())
        },
        1e-3,
        200,
        11,
    )
    .unwrap();
    assert!(err < 1e-3, "mha rel err {err}");
}
