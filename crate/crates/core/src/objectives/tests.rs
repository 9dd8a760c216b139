use super::*;
use crate::diffcore::{grad_check_many, grad_check_params, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn sd_value(c: &Tensor<f64>, s: &Tensor<f64>, norm: SdNormalization) -> f64 {
    let mut tape = Tape::<f64>::new();
    let (cv, sv) = (tape.constant(c.clone()), tape.constant(s.clone()));
    let l = sd_loss_with(&mut tape, cv, sv, norm).unwrap();
    tape.item(l)
}

/// Direct triple loop over `(E_c·E_sᵀ)_{ij}`.
fn sd_oracle(c: &Tensor<f64>, s: &Tensor<f64>) -> f64 {
    let t = c.rows();
    let mut total = 0.0;
    for i in 0..t {
        for j in 0..t {
            let dot: f64 = c.row(i).iter().zip(s.row(j)).map(|(a, b)| a * b).sum();
            total += dot * dot;
        }
    }
    total / (t * t) as f64
}

#[test]
fn sd_orthogonal_rows_give_zero() {
    let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
    let s = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0]]).unwrap();
    assert_eq!(sd_value(&c, &s, SdNormalization::PerFrame), 0.0);
}

#[test]
fn sd_identity_case() {
    let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!((sd_value(&i2, &i2, SdNormalization::PerFrame) - 0.5).abs() < 1e-12);
    assert!((sd_value(&i2, &i2, SdNormalization::Raw) - 2.0).abs() < 1e-12);
}

#[test]
fn sd_matches_oracle_and_blocks_content_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = gaussian(4, 8, &mut rng);
    let s = gaussian(4, 8, &mut rng);
    assert!((sd_value(&c, &s, SdNormalization::PerFrame) - sd_oracle(&c, &s)).abs() < 1e-5);

    let mut tape = Tape::<f64>::new();
    let cv = tape.leaf(c.clone().with_grad());
    let sv = tape.leaf(s.clone().with_grad());
    let l = sd_loss(&mut tape, cv, sv).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(cv).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    assert!(tape.grad(sv).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn sd_gradient_check_on_style() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = gaussian(5, 6, &mut rng);
    let s = gaussian(5, 6, &mut rng);
    let report = grad_check_many(
        |tape, v| {
            let cv = tape.constant(c.clone());
            sd_loss(tape, cv, v[0])
        },
        &[s],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
}

#[test]
fn sd_rejects_mismatched_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![3, 4]));
    let b = tape.constant(Tensor::zeros(vec![3, 5]));
    let c = tape.constant(Tensor::zeros(vec![2, 4]));
    assert!(sd_loss(&mut tape, a, b).is_err());
    assert!(sd_loss(&mut tape, a, c).is_err());
}

proptest! {
    #[test]
    fn sd_is_zero_iff_all_cross_products_vanish(
        c in prop::collection::vec(-2.0f64..2.0, 6),
        s in prop::collection::vec(-2.0f64..2.0, 6),
        zero_mask in any::<bool>(),
    ) {
        let c = Tensor::new(vec![2, 3], c).unwrap();
        let s = if zero_mask { Tensor::zeros(vec![2, 3]) } else { Tensor::new(vec![2, 3], s).unwrap() };
        let v = sd_value(&c, &s, SdNormalization::PerFrame);
        let any_nonzero = (0..2).any(|i| (0..2).any(|j| {
            c.row(i).iter().zip(s.row(j)).map(|(a, b)| a * b).sum::<f64>().abs() > 0.0
        }));
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v > 0.0, any_nonzero);
    }
}

fn sp_projected(s: &Tensor<f64>, p: &Tensor<f64>) -> f64 {
    let mut tape = Tape::<f64>::new();
    let (sv, pv) = (tape.constant(s.clone()), tape.constant(p.clone()));
    let l = sp_loss_projected(&mut tape, sv, pv).unwrap();
    tape.item(l)
}

#[test]
fn sp_aligned_and_orthogonal_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = gaussian(5, HEAD_DIM, &mut rng);
    assert!((sp_projected(&s, &s) + 5.0).abs() < 1e-6);

    let mut a = Tensor::<f64>::zeros(vec![3, HEAD_DIM]);
    let mut b = Tensor::<f64>::zeros(vec![3, HEAD_DIM]);
    for i in 0..3 {
        a.data_mut()[i * HEAD_DIM + i] = 1.0 + i as f64;
        b.data_mut()[i * HEAD_DIM + i + 1] = 0.5;
    }
    assert_eq!(sp_projected(&a, &b), 0.0);

    // A zero prosody frame contributes 0 instead of NaN.
    let z = Tensor::<f64>::zeros(vec![3, HEAD_DIM]);
    assert_eq!(sp_projected(&a, &z), 0.0);
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-8)
}

fn heads(seed: u64, style_dim: usize) -> (MlpHead, MlpHead, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let hs = MlpHead::new(&mut store, "head_s", style_dim, &mut rng).unwrap();
    let hp = MlpHead::new(&mut store, "head_p", 20, &mut rng).unwrap();
    (hs, hp, store.cast())
}

#[test]
fn sp_matches_oracle_through_heads() {
    let (hs, hp, store) = heads(3, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let style = gaussian(3, 16, &mut rng);
    let low = gaussian(3, 20, &mut rng);

    let mut tape = Tape::<f64>::new();
    tape.bind_params(&store);
    let sv = tape.constant(style.clone());
    let lv = tape.constant(low.clone());
    let s_proj = hs.forward(&mut tape, sv).unwrap();
    let p_proj = hp.forward(&mut tape, lv).unwrap();
    assert_eq!(tape.shape(s_proj), &[3, HEAD_DIM]);
    assert_eq!(tape.shape(p_proj), &[3, HEAD_DIM]);
    let loss = sp_loss(&mut tape, sv, lv, &hs, &hp).unwrap();

    let (sp, pp) = (tape.value(s_proj).clone(), tape.value(p_proj).clone());
    let want: f64 = -(0..3).map(|i| cosine_oracle(pp.row(i), sp.row(i))).sum::<f64>();
    assert!((tape.item(loss) - want).abs() < 1e-5);
    assert!(tape.item(loss) >= -3.0 && tape.item(loss) <= 3.0);
}

#[test]
fn sp_gradients_reach_heads_and_style() {
    let (hs, hp, store) = heads(5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let style = gaussian(4, 8, &mut rng);
    let low = gaussian(4, 20, &mut rng);
    let checks = grad_check_params(
        &store,
        |tape| {
            let sv = tape.constant(style.clone());
            let lv = tape.constant(low.clone());
            sp_loss(tape, sv, lv, &hs, &hp)
        },
        1e-5,
        20,
        1e-6,
    )
    .unwrap();
    assert_eq!(checks.len(), 8);
    for c in &checks {
        assert!(c.max_rel_error < 1e-3, "{}: {}", c.name, c.max_rel_error);
    }
    let report = grad_check_many(
        |tape, v| {
            tape.bind_params(&store);
            let lv = tape.constant(low.clone());
            sp_loss(tape, v[0], lv, &hs, &hp)
        },
        &[style],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3);
}

#[test]
fn sp_rejects_mismatched_lengths() {
    let (hs, hp, store) = heads(7, 8);
    let mut tape = Tape::<f64>::new();
    tape.bind_params(&store);
    let s = tape.constant(Tensor::zeros(vec![3, 8]));
    let l = tape.constant(Tensor::zeros(vec![4, 20]));
    assert!(sp_loss(&mut tape, s, l, &hs, &hp).is_err());
    let l = tape.constant(Tensor::zeros(vec![3, 19]));
    assert!(sp_loss(&mut tape, s, l, &hs, &hp).is_err());
}

proptest! {
    #[test]
    fn sp_is_scale_invariant_per_frame(
        s in prop::collection::vec(-1.0f64..1.0, 3 * HEAD_DIM),
        p in prop::collection::vec(-1.0f64..1.0, 3 * HEAD_DIM),
        scales in prop::collection::vec(0.1f64..10.0, 6),
    ) {
        let s = Tensor::new(vec![3, HEAD_DIM], s).unwrap();
        let p = Tensor::new(vec![3, HEAD_DIM], p).unwrap();
        let base = sp_projected(&s, &p);
        let mut s2 = s.clone();
        let mut p2 = p.clone();
        for i in 0..3 {
            s2.data_mut()[i * HEAD_DIM..(i + 1) * HEAD_DIM].iter_mut().for_each(|x| *x *= scales[i]);
            p2.data_mut()[i * HEAD_DIM..(i + 1) * HEAD_DIM].iter_mut().for_each(|x| *x *= scales[3 + i]);
        }
        prop_assert!((sp_projected(&s2, &p2) - base).abs() < 1e-5);
        prop_assert!((-3.0..=3.0).contains(&base));
    }
}

fn scalar(tape: &mut Tape<f64>, v: f64) -> Var {
    tape.leaf(Tensor::scalar(v).with_grad())
}

#[test]
fn total_loss_fixtures() {
    let w = LossWeights::default();
    let mut tape = Tape::<f64>::new();
    let zero = [0.0; 4].map(|v| scalar(&mut tape, v));
    let terms = LossTerms {
        recon: zero[0],
        rvq: Some(zero[1]),
        sd: Some(zero[2]),
        sp: Some(zero[3]),
    };
    let (t, r) = total_loss(&mut tape, terms, &w).unwrap();
    assert_eq!(tape.item(t), 0.0);
    assert_eq!(r.total, 0.0);

    let ones = [1.0; 4].map(|v| scalar(&mut tape, v));
    let terms = LossTerms {
        recon: ones[0],
        rvq: Some(ones[1]),
        sd: Some(ones[2]),
        sp: Some(ones[3]),
    };
    let (t, r) = total_loss(&mut tape, terms, &w).unwrap();
    assert!((tape.item(t) - 2.04).abs() < 1e-12);
    assert!((r.total - 2.04).abs() < 1e-12);
}

#[test]
fn zeroed_weights_still_report_terms() {
    let w = LossWeights {
        sd: 0.0,
        sp: 0.0,
        ..LossWeights::default()
    };
    let mut tape = Tape::<f64>::new();
    let v = [0.5, 0.25, 3.0, -2.0].map(|v| scalar(&mut tape, v));
    let terms = LossTerms {
        recon: v[0],
        rvq: Some(v[1]),
        sd: Some(v[2]),
        sp: Some(v[3]),
    };
    let (t, r) = total_loss(&mut tape, terms, &w).unwrap();
    assert_eq!((r.sd, r.sp), (3.0, -2.0));
    assert!((tape.item(t) - 0.75).abs() < 1e-12);
    tape.backward(t).unwrap();
    assert!(tape.grad(v[2]).is_none_or(|g| g[0] == 0.0));
}

#[test]
fn non_finite_terms_are_named() {
    let w = LossWeights::default();
    for (idx, name) in [(0, "recon"), (1, "rvq"), (2, "sd"), (3, "sp")] {
        let mut tape = Tape::<f64>::new();
        let mut vals = [1.0; 4];
        vals[idx] = if idx % 2 == 0 { f64::NAN } else { f64::INFINITY };
        let v = vals.map(|x| scalar(&mut tape, x));
        let terms = LossTerms {
            recon: v[0],
            rvq: Some(v[1]),
            sd: Some(v[2]),
            sp: Some(v[3]),
        };
        match total_loss(&mut tape, terms, &w) {
            Err(Error::NonFinite { term }) => assert_eq!(term, name),
            other => panic!("expected NonFinite, got {:?}", other.map(|(_, r)| r)),
        }
    }
}

#[test]
fn weights_validate_and_roundtrip() {
    let w = LossWeights::default();
    assert!(w.validate().is_ok());
    assert!(LossWeights { sd: -1.0, ..w }.validate().is_err());
    let json = serde_json::to_string(&w).unwrap();
    assert_eq!(serde_json::from_str::<LossWeights>(&json).unwrap(), w);
    assert!(serde_json::from_str::<LossWeights>(r#"{"rvq": 1.0, "bogus": 2}"#).is_err());
}

proptest! {
    #[test]
    fn report_fields_sum_to_total(
        vals in prop::collection::vec(-10.0f64..10.0, 4),
        ws in prop::collection::vec(0.0f64..2.0, 3),
    ) {
        let w = LossWeights { rvq: ws[0], adv: 0.05, sd: ws[1], sp: ws[2] };
        let mut tape = Tape::<f64>::new();
        let v: Vec<Var> = vals.iter().map(|&x| scalar(&mut tape, x)).collect();
        let terms = LossTerms { recon: v[0], rvq: Some(v[1]), sd: Some(v[2]), sp: Some(v[3]) };
        let (_, r) = total_loss(&mut tape, terms, &w).unwrap();
        let want = r.recon + w.rvq * r.rvq + w.sd * r.sd + w.sp * r.sp;
        prop_assert!((r.total - want).abs() < 1e-6);
    }
}
