mod common;

use knnfuse::ann::ExactIndex;
use knnfuse::fusion::{
    fusion_backward, fusion_forward, gather_context, gradcheck, layer_norm, FusionParams, GradGroup, GradcheckShape,
};
use knnfuse::memory::{ExternalMemory, MemoryRecord};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{gauss, random_store};

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 256;
    let (g, b) = (1.7, -0.4);
    let gamma = Array1::from_elem(d, g);
    let beta = Array1::from_elem(d, b);
    for _ in 0..1000 {
        let scale = rng.random_range(0.1..10.0);
        let shift = rng.random_range(-5.0..5.0);
        let x = Array1::from_shape_fn(d, |_| shift + scale * gauss(&mut rng));
        let y = layer_norm(x.view(), gamma.view(), beta.view(), 1e-5);
        let mean = y.mean().unwrap();
        let sd = y.mapv(|v| (v - mean).powi(2)).mean().unwrap().sqrt();
        assert!((mean - b).abs() < 1e-2);
        assert!((sd - g).abs() < 1e-2);
    }
}

fn grid_memory() -> ExternalMemory {
    // 32 points on a line: two frames at either end have disjoint top-8 sets
    let mut m = ExternalMemory::new(2, 3).unwrap();
    for i in 0..32u64 {
        m.append(MemoryRecord::new(i, vec![i as f32, 0.0], vec![i as f32, 1.0, -1.0], i))
            .unwrap();
    }
    m
}

#[test]
fn context_sizes_for_disjoint_and_identical_frames() {
    let mem = grid_memory();
    let exact = ExactIndex::new(&mem);
    let disjoint = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 31.0, 0.0]).unwrap();
    let ctx = gather_context(disjoint.view(), &exact, 8).unwrap();
    assert_eq!(ctx.len(), 16);
    assert_eq!(ctx.keys.dim(), (16, 2));
    assert_eq!(ctx.values.dim(), (16, 3));
    for (row, id) in ctx.values.rows().into_iter().zip(&ctx.record_ids) {
        assert_eq!(row[0], *id as f64);
    }
    let same = Array2::from_shape_vec((2, 2), vec![5.0, 0.0, 5.0, 0.0]).unwrap();
    assert_eq!(gather_context(same.view(), &exact, 8).unwrap().len(), 8);
}

#[test]
fn gradcheck_default_seed_and_corruption() {
    let shape = GradcheckShape {
        frames: 3,
        n_ctx: 5,
        d_model: 6,
        d_key: 4,
        d_value: 5,
    };
    assert!(gradcheck(shape, 0, None).unwrap().passed());
    for g in GradGroup::ALL {
        let r = gradcheck(shape, 0, Some(g)).unwrap();
        assert_eq!(r.failing(), vec![g]);
    }
    let too_big = GradcheckShape { d_model: 17, ..shape };
    assert!(gradcheck(too_big, 0, None).is_err());
}

#[test]
fn backward_shapes_follow_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mem = random_store(200, 6, false, &mut rng);
    let mut wide = ExternalMemory::new(6, 5).unwrap();
    for r in mem.records() {
        let v: Vec<f32> = (0..5).map(|i| r.key[i] * 0.5).collect();
        wide.append(MemoryRecord::new(r.id, r.key.clone(), v, r.entry_id)).unwrap();
    }
    let a = Array2::from_shape_fn((4, 7), |_| gauss(&mut rng));
    let frames = Array2::from_shape_fn((4, 6), |_| gauss(&mut rng));
    let ctx = gather_context(frames.view(), &ExactIndex::new(&wide), 3).unwrap();
    let p = FusionParams::init(7, 6, 5, 3, &mut rng);
    let (out, tape) = fusion_forward(a.view(), &ctx, &p).unwrap();
    assert_eq!(out.dim(), (4, 7));
    let g = fusion_backward(&tape, Array2::ones((4, 7)).view()).unwrap();
    assert_eq!(g.d_a.dim(), (4, 7));
    assert_eq!(g.d_w_q.dim(), (7, 6));
    assert_eq!(g.d_w_v.dim(), (5, 7));
    assert_eq!((g.d_ln_gamma.len(), g.d_ln_beta.len()), (7, 7));
    assert!(fusion_backward(&tape, Array2::ones((3, 7)).view()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn context_is_bounded_and_aligned(seed in any::<u64>(), frames in 1usize..6, m in 1usize..10, n in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mem = random_store(n, 4, seed % 2 == 0, &mut rng);
        let q = Array2::from_shape_fn((frames, 4), |_| gauss(&mut rng));
        let ctx = gather_context(q.view(), &ExactIndex::new(&mem), m).unwrap();
        prop_assert!(ctx.len() <= m * frames);
        prop_assert!(ctx.len() >= m.min(n));
        let mut ids = ctx.record_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), ctx.len());
        for (i, id) in ctx.record_ids.iter().enumerate() {
            let rec = mem.get(*id).unwrap();
            prop_assert!(ctx.keys.row(i).iter().zip(&rec.key).all(|(a, b)| *a == f64::from(*b)));
            prop_assert!(ctx.values.row(i).iter().zip(&rec.value).all(|(a, b)| *a == f64::from(*b)));
        }
    }

    #[test]
    fn random_shapes_pass_gradcheck(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = GradcheckShape::random(&mut rng);
        let r = gradcheck(shape, seed, None).unwrap();
        prop_assert!(r.passed(), "{:?}: {:?}", shape, r.errors);
    }
}
