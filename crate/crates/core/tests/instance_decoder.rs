use std::f64::consts::PI;

use kernelvis::autodiff::sigmoid;
use kernelvis::gradcheck::{check_params, sampled_coords};
use kernelvis::instance_decoder::{
    extract_local_features, fused_scores, segment, sine_position_embedding, DecoderMode, DecoderStage,
    InstanceDecoder, PoolKind, PredictionHeads, StageSource,
};
use kernelvis::model::{ModelConfig, Network};
use kernelvis::nn::Ctx;
use kernelvis::{Error, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn zero_all(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<_> = store.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn position_embedding_matches_closed_form() {
    let (h, w, d) = (5, 7, 12);
    let pe = sine_position_embedding(h, w, d).unwrap();
    assert_eq!(pe.shape(), &[d, h, w]);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(pe.at(&[0, 0, 0]), 0.0);
    assert_eq!(pe.at(&[1, 0, 0]), 1.0);
    for c in 0..d {
        for y in 0..h {
            for x in 0..w {
                let half = d / 2;
                let (axis, coord) = if c < half { (c, y as f64 / h as f64) } else { (c - half, x as f64 / w as f64) };
                let i = axis / 2;
                let omega = 10000f64.powf(2.0 * i as f64 / half as f64);
                let arg = 2.0 * PI * coord / omega;
                let want = if axis % 2 == 0 { arg.sin() } else { arg.cos() };
                assert!((pe.at(&[c, y, x]) - want).abs() < 1e-6);
            }
        }
    }
    assert!(matches!(sine_position_embedding(2, 2, 7), Err(Error::Argument(_))));
}

#[test]
fn local_features_pooling() {
    let tape = Tape::new();
    let mut r = rng(3);
    let x = tape.constant(Tensor::randn(&[4, 64, 64], 1.0, &mut r));
    let xl = extract_local_features(x, PoolKind::Max, 8).unwrap();
    assert_eq!(xl.shape(), vec![4, 8, 8]);
    let avg = extract_local_features(x, PoolKind::Avg, 8).unwrap();
    assert!(xl.value().data().iter().zip(avg.value().data()).all(|(m, a)| m > a));
    assert_eq!(extract_local_features(x, PoolKind::Max, 4).unwrap().shape(), vec![4, 16, 16]);

    let c = tape.constant(Tensor::full(&[2, 16, 16], 1.5));
    for kind in [PoolKind::Max, PoolKind::Avg] {
        assert!(extract_local_features(c, kind, 8).unwrap().value().data().iter().all(|&v| v == 1.5));
    }
    let odd = tape.constant(Tensor::zeros(&[2, 12, 12]));
    assert!(matches!(extract_local_features(odd, PoolKind::Max, 8), Err(Error::Shape(_))));
}

fn stage(store: &mut ParamStore, c: usize, d: usize) -> DecoderStage {
    DecoderStage::new(store, "s", StageSource::Global, c, d, 2, 2 * d, &mut rng(1)).unwrap()
}

#[test]
fn zero_output_weights_leave_queries_unchanged() {
    let mut store = ParamStore::new();
    let s = stage(&mut store, 6, 8);
    for lin in [&s.self_attn.out, &s.cross_attn.out, &s.ffn.fc2] {
        store.get_mut(lin.weight).data_mut().fill(0.0);
        store.get_mut(lin.bias).data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let q0 = Tensor::randn(&[5, 8], 1.0, &mut rng(2));
    let q = cx.constant(q0.clone());
    let feats = cx.constant(Tensor::randn(&[6, 3, 3], 1.0, &mut rng(3)));
    let out = s.forward(&cx, q, feats).unwrap();
    assert_eq!(out.value().data(), q0.data());
}

#[test]
fn single_location_cross_attention_returns_value_projection() {
    let mut store = ParamStore::new();
    let s = stage(&mut store, 8, 8);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let q = cx.constant(Tensor::randn(&[4, 8], 1.0, &mut rng(4)));
    let token = cx.constant(Tensor::randn(&[1, 8], 1.0, &mut rng(5)));
    let (out, weights) = s.cross_attn.forward_with_weights(&cx, q, token, token).unwrap();
    assert!(weights.value().data().iter().all(|&w| w == 1.0));
    let v = s.cross_attn.v.forward(&cx, token).unwrap();
    let expected = s.cross_attn.out.forward(&cx, v).unwrap().value();
    for row in 0..4 {
        for (a, b) in out.value().row(row).iter().zip(expected.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_weights_are_distributions() {
    let mut store = ParamStore::new();
    let s = stage(&mut store, 6, 8);
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let q = cx.constant(Tensor::randn(&[7, 8], 1.0, &mut rng(6)));
    let feats = cx.constant(Tensor::randn(&[6, 4, 5], 1.0, &mut rng(7)));
    let (out, w) = s.forward_with_attention(&cx, q, feats).unwrap();
    assert_eq!(out.shape(), vec![7, 8]);
    assert_eq!(w.shape(), vec![2, 7, 20]);
    for row in w.value().data().chunks(20) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let wrong = cx.constant(Tensor::zeros(&[5, 2, 2]));
    assert!(matches!(s.forward(&cx, q, wrong), Err(Error::Shape(_))));
}

fn decoder(store: &mut ParamStore, mode: DecoderMode) -> InstanceDecoder {
    InstanceDecoder::new(store, mode, 12, 8, 8, 2, 16, &mut rng(8)).unwrap()
}

#[test]
fn every_mode_preserves_query_count() {
    for mode in [
        DecoderMode::GlobalLocal,
        DecoderMode::LocalLocal,
        DecoderMode::GlobalOnly,
        DecoderMode::LocalOnly,
        DecoderMode::GlobalGlobal,
    ] {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store, mode);
        assert_eq!(dec.stages.len(), mode.stages().len());
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let q0 = cx.constant(Tensor::randn(&[9, 8], 1.0, &mut rng(9)));
        let xg = cx.constant(Tensor::randn(&[12, 2, 2], 1.0, &mut rng(10)));
        let xl = cx.constant(Tensor::randn(&[8, 4, 4], 1.0, &mut rng(11)));
        let out = dec.dual_decode(&cx, q0, xg, xl).unwrap();
        assert_eq!(out.q_first.shape(), vec![9, 8]);
        assert_eq!(out.q_final.shape(), vec![9, 8]);
        assert_eq!(mode.to_string().parse::<DecoderMode>().unwrap(), mode);
    }
}

#[test]
fn zero_decoder_is_identity() {
    let mut store = ParamStore::new();
    let dec = decoder(&mut store, DecoderMode::GlobalLocal);
    zero_all(&mut store, "decoder.");
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let q0 = Tensor::randn(&[6, 8], 1.0, &mut rng(12));
    let xg = cx.constant(Tensor::randn(&[12, 2, 2], 1.0, &mut rng(13)));
    let xl = cx.constant(Tensor::randn(&[8, 4, 4], 1.0, &mut rng(14)));
    let out = dec.dual_decode(&cx, cx.constant(q0.clone()), xg, xl).unwrap();
    assert_eq!(out.q_final.value().data(), q0.data());
}

#[test]
fn global_stage_ignores_local_features() {
    let mut store = ParamStore::new();
    let dec = decoder(&mut store, DecoderMode::GlobalLocal);
    let q0 = Tensor::randn(&[6, 8], 1.0, &mut rng(15));
    let xg = Tensor::randn(&[12, 2, 2], 1.0, &mut rng(16));
    let xl = Tensor::randn(&[8, 4, 4], 1.0, &mut rng(17));
    let run = |xg: &Tensor, xl: &Tensor| {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let out = dec.dual_decode(&cx, cx.constant(q0.clone()), cx.constant(xg.clone()), cx.constant(xl.clone())).unwrap();
        (out.q_first.value().as_ref().clone(), out.q_final.value().as_ref().clone())
    };
    let base = run(&xg, &xl);
    let xl2 = xl.map(|v| v + 0.3);
    let mut xg2 = xg.clone();
    xg2.data_mut()[5] += 0.3;
    let local_moved = run(&xg, &xl2);
    let global_moved = run(&xg2, &xl);
    assert_eq!(local_moved.0, base.0);
    assert_ne!(local_moved.1, base.1);
    assert_ne!(global_moved.0, base.0);
}

#[test]
fn heads_scores_and_shapes() {
    let mut store = ParamStore::new();
    let heads = PredictionHeads::new(&mut store, 8, 3, 5, &mut rng(18));
    let tape = Tape::new();
    {
        let cx = Ctx::new(&tape, &store);
        let q = cx.constant(Tensor::randn(&[4, 8], 1.0, &mut rng(19)));
        let p = heads.forward(&cx, q).unwrap();
        assert_eq!(p.kernels.shape(), vec![4, 5]);
        assert_eq!(p.class_logits.shape(), vec![4, 3]);
        assert_eq!(p.objectness.shape(), vec![4, 1]);
    }
    for id in heads.param_ids() {
        if !store.name(id).starts_with("heads.norm") {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store);
    let q = cx.constant(Tensor::randn(&[4, 8], 1.0, &mut rng(20)));
    let p = heads.forward(&cx, q).unwrap();
    assert!(p.scores().iter().all(|&s| s == 0.5));
}

#[test]
fn score_fusion_matches_closed_form() {
    let mut r = rng(21);
    let logits = Tensor::randn(&[6, 4], 2.0, &mut r);
    let obj = Tensor::randn(&[6, 1], 2.0, &mut r);
    let got = fused_scores(&logits, &obj);
    for i in 0..6 {
        let best = (0..4).map(|c| logits.at(&[i, c])).fold(f64::MIN, f64::max);
        let p = 1.0 / (1.0 + (-best).exp());
        let o = 1.0 / (1.0 + (-obj.at(&[i, 0])).exp());
        assert!((got[i] - (p * o).sqrt()).abs() < 1e-7);
    }
}

fn segment_oracle(k: &Tensor, x: &Tensor) -> Tensor {
    let (n, d) = (k.shape()[0], k.shape()[1]);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[n, h, w]);
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for c in 0..d {
                    s += k.at(&[i, c]) * x.at(&[c, y, xx]);
                }
                out.set(&[i, y, xx], s);
            }
        }
    }
    out
}

#[test]
fn segment_basics() {
    let tape = Tape::new();
    let x = Tensor::randn(&[5, 4, 3], 1.0, &mut rng(22));
    let mut onehot = Tensor::zeros(&[2, 5]);
    onehot.set(&[0, 2], 1.0);
    let m = segment(tape.constant(onehot), tape.constant(x.clone())).unwrap().value();
    assert_eq!(&m.data()[..12], &x.data()[24..36]);
    assert!(m.data()[12..].iter().all(|&v| v == 0.0));
    assert!(m.data()[12..].iter().all(|&v| sigmoid(v) == 0.5));
    assert!(matches!(
        segment(tape.constant(Tensor::zeros(&[2, 4])), tape.constant(x)),
        Err(Error::Shape(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn segment_matches_loop_oracle(seed in any::<u64>(), n in 1usize..6, d in 1usize..9, h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let k = Tensor::randn(&[n, d], 1.0, &mut r);
        let x = Tensor::randn(&[d, h, w], 1.0, &mut r);
        let tape = Tape::new();
        let got = segment(tape.constant(k.clone()), tape.constant(x.clone())).unwrap().value();
        prop_assert!(got.max_abs_diff(&segment_oracle(&k, &x)) < 1e-6);
    }

    #[test]
    fn segment_is_linear_in_kernels(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let k1 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let k2 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let x = Tensor::randn(&[4, 5, 5], 1.0, &mut r);
        let tape = Tape::new();
        let seg = |k: Tensor| segment(tape.constant(k), tape.constant(x.clone())).unwrap().value();
        let mix = Tensor::from_vec(&[3, 4], k1.data().iter().zip(k2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = seg(mix);
        let (s1, s2) = (seg(k1), seg(k2));
        for ((l, p), q) in lhs.data().iter().zip(s1.data()).zip(s2.data()) {
            prop_assert!((l - (a * p + b * q)).abs() < 1e-6);
        }
    }
}

#[test]
fn query_permutation_is_equivariant() {
    let (net, store) = Network::build(&ModelConfig::tiny(), 3).unwrap();
    let image = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng(23));
    let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
    let mut permuted = store.clone();
    let q = store.get(net.queries).clone();
    for (i, &p) in perm.iter().enumerate() {
        permuted.get_mut(net.queries).data_mut()[i * 8..(i + 1) * 8].copy_from_slice(q.row(p));
    }
    let eval = |s: &ParamStore| {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, s);
        let o = net.forward(&cx, &image).unwrap();
        let rows = |v: kernelvis::Var| v.value().as_ref().clone();
        (rows(o.pred.class_logits), rows(o.pred.kernels), rows(o.pred.objectness), rows(o.masks))
    };
    let (a, b) = (eval(&store), eval(&permuted));
    for (x, y) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2), (&a.3, &b.3)] {
        let len = x.numel() / 8;
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..len {
                assert!((y.data()[i * len + j] - x.data()[p * len + j]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn decoder_and_heads_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let dec = decoder(&mut store, DecoderMode::GlobalLocal);
    let heads = PredictionHeads::new(&mut store, 8, 3, 8, &mut rng(24));
    let q0 = Tensor::randn(&[4, 8], 1.0, &mut rng(25));
    let xg = Tensor::randn(&[12, 2, 2], 1.0, &mut rng(26));
    let xl = Tensor::randn(&[8, 4, 4], 1.0, &mut rng(27));
    let probe = Tensor::randn(&[4, 4, 4], 1.0, &mut rng(28));
    let coords = sampled_coords(&store, 6);
    let report = check_params(&store, &coords, 1e-4, |tape, s| {
        let cx = Ctx::new(tape, s);
        let out = dec.dual_decode(&cx, cx.constant(q0.clone()), cx.constant(xg.clone()), cx.constant(xl.clone()))?;
        let p = heads.forward(&cx, out.q_final)?;
        let masks = segment(p.kernels, cx.constant(xl.clone()))?;
        let a = masks.mul(cx.constant(probe.clone()))?.sum();
        let b = p.class_logits.sigmoid().sum().add(p.objectness.softplus().sum())?;
        a.add(b)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}
