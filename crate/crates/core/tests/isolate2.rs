use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xtra_core::alignment::{hconcat, ProjectionHead};
use xtra_core::numerics::layers::Linear;
use xtra_core::numerics::{finite_difference_check, ops, Matrix, Mode, Parameter};
use xtra_core::Mat;

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

// heads -> hconcat -> joint linear -> squared loss on zj only
#[test]
fn isolate_heads_joint() {
    struct St {
        ih: ProjectionHead<f32>,
        rh: ProjectionHead<f32>,
        j: Linear<f32>,
        x: Mat,
        r: Mat,
        t: Mat,
    }
    let z = 8usize;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut st = St {
        ih: ProjectionHead::new("ih", z, 0.0, &mut rng),
        rh: ProjectionHead::new("rh", z, 0.0, &mut rng),
        j: Linear::new("j", 2 * z, z, &mut rng),
        x: random_mat(4, z, &mut rng),
        r: random_mat(4, z, &mut rng),
        t: random_mat(4, z, &mut rng),
    };
    {
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let (zx, cx) = st.ih.forward(&st.x, Mode::Eval, &mut drng).unwrap();
        let (zr, cr) = st.rh.forward(&st.r, Mode::Eval, &mut drng).unwrap();
        let joined = hconcat(&zx, &zr).unwrap();
        let (zj, cj) = st.j.forward(&joined).unwrap();
        let d_zj = zj.sub(&st.t).unwrap();
        let d_joined = st.j.backward(&cj, &d_zj).unwrap();
        // split back
        let b = 4;
        let mut dl = Vec::new();
        let mut dr = Vec::new();
        for row in 0..b {
            dl.extend_from_slice(&d_joined.row(row)[..z]);
            dr.extend_from_slice(&d_joined.row(row)[z..]);
        }
        let dzx = Mat::from_vec(b, z, dl).unwrap();
        let dzr = Mat::from_vec(b, z, dr).unwrap();
        st.ih.backward(&cx, &dzx).unwrap();
        st.rh.backward(&cr, &dzr).unwrap();
    }
    let err = finite_difference_check(
        &mut st,
        |s| {
            let mut p = s.ih.params_mut();
            p.extend(s.rh.params_mut());
            p.extend(s.j.params_mut());
            p
        },
        |s| {
            let ih = s.ih.convert::<f64>();
            let rh = s.rh.convert::<f64>();
            let j = s.j.convert::<f64>();
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let (zx, _) = ih.forward(&s.x.convert(), Mode::Eval, &mut drng).unwrap();
            let (zr, _) = rh.forward(&s.r.convert(), Mode::Eval, &mut drng).unwrap();
            let joined = hconcat(&zx, &zr).unwrap();
            let (zj, _) = j.forward(&joined).unwrap();
            let d: Matrix<f64> = zj.sub(&s.t.convert()).unwrap();
            Ok(0.5 * d.frob_sq())
        },
        1e-3,
        200,
        12,
    )
    .unwrap();
    assert!(err < 1e-3, "heads+joint rel err {err}");
}

// two MHA branches + batch of 2, squared loss over the fused concat
#[test]
fn isolate_fused_batch() {
    use xtra_core::augment::{augment_backward, fused_input, FusionBlocks, FusionConfig, FusionStrategy};
    use xtra_core::alignment::AlignedVector;
    use xtra_core::data::{Labels, Modality};
    use xtra_core::index::{Neighbor, NeighborSet};
    use xtra_core::tasks::PreparedSample;

    let z = 8usize;
    let fusion = FusionConfig {
        strategy: FusionStrategy::Mha,
        use_intra: true,
        use_inter: true,
        k: 3,
        n_heads: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut blocks = FusionBlocks::<f32>::new(&fusion, z, 5).unwrap();
    for b in [blocks.intra.as_mut(), blocks.inter.as_mut()].into_iter().flatten() {
        b.w_out = Parameter::xavier(b.w_out.name.clone(), z, z, &mut rng);
    }
    let mut make_set = |rng: &mut ChaCha8Rng| -> NeighborSet {
        let neighbors = (0..3)
            .map(|i| {
                let v: Vec<f32> = (0..z).map(|_| rng.random_range(-1.0..1.0)).collect();
                let unit = ops::l2_normalize_rows(&Mat::from_vec(1, z, v).unwrap());
                Neighbor {
                    id: format!("n{i}"),
                    pair_id: format!("p{i}"),
                    similarity: 0.5,
                    vector: unit.data().to_vec(),
                    labels: Labels::from_classes(&[0]),
                    text: None,
                    modality: Modality::Image,
                    source: 0,
                }
            })
            .collect();
        NeighborSet { query_id: None, neighbors, k: 3 }
    };
    let mut samples = Vec::new();
    for b in 0..2 {
        let qv: Vec<f32> = (0..z).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        samples.push(PreparedSample {
            query: AlignedVector::new(qv, Modality::Image).unwrap(),
            intra: Some(make_set(&mut rng)),
            inter: Some(make_set(&mut rng)),
            labels: vec![0.0; 14],
            pair_id: format!("q{b}"),
        });
    }
    let d_in = fusion.output_dim(z);
    let t = random_mat(2, d_in, &mut rng);

    struct St {
        blocks: FusionBlocks<f32>,
        fusion: FusionConfig,
        samples: Vec<PreparedSample>,
        t: Mat,
    }
    let mut st = St { blocks, fusion, samples, t };
    {
        let mut inputs = Vec::new();
        let mut caches = Vec::new();
        for s in &st.samples {
            let (v, c) = fused_input::<f32>(&s.query.values, s.intra.as_ref(), s.inter.as_ref(), &st.fusion, &st.blocks).unwrap();
            inputs.extend_from_slice(&v);
            caches.push(c);
        }
        let x = Mat::from_vec(2, d_in, inputs).unwrap();
        let d_x = x.sub(&st.t).unwrap();
        let fusion = st.fusion;
        for (row, c) in caches.iter().enumerate() {
            augment_backward(&mut st.blocks, c, &fusion, d_x.row(row), z).unwrap();
        }
    }
    let err = finite_difference_check(
        &mut st,
        |s| s.blocks.params_mut(),
        |s| {
            let b64 = s.blocks.convert::<f64>();
            let mut inputs: Vec<f64> = Vec::new();
            for sm in &s.samples {
                let (v, _) = fused_input::<f64>(&sm.query.values, sm.intra.as_ref(), sm.inter.as_ref(), &s.fusion, &b64).unwrap();
                inputs.extend_from_slice(&v);
            }
            let x = Matrix::<f64>::from_vec(2, d_in, inputs).unwrap();
            let d = x.sub(&s.t.convert()).unwrap();
            Ok(0.5 * d.frob_sq())
        },
        1e-3,
        200,
        13,
    )
    .unwrap();
    assert!(err < 1e-3, "fused batch rel err {err}");
}
