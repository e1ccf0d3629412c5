use kernelvis::losses::GroundTruth;
use kernelvis::metrics::{eleven_point_ap, evaluate_clip, FramePrediction};
use kernelvis::rle::{self, ResultRecord, GT_FILE};
use kernelvis::synth::{clip_seed, export_clip, generate_clip, generate_dataset, is_connected, load_frames, SynthConfig};
use kernelvis::{Error, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> SynthConfig {
    SynthConfig { size: 64, frames: 4, min_radius: 8.0, max_radius: 14.0, ..SynthConfig::default() }
}

#[test]
fn clips_are_pure_functions_of_the_seed() {
    let cfg = small();
    assert_eq!(generate_clip(&cfg, 3).unwrap(), generate_clip(&cfg, 3).unwrap());
    assert_ne!(generate_clip(&cfg, 3).unwrap().frames, generate_clip(&cfg, 4).unwrap().frames);
    let ds = generate_dataset(&cfg, 9, 3).unwrap();
    for (i, clip) in ds.iter().enumerate() {
        assert_eq!(clip.seed, clip_seed(9, i as u64));
        assert_eq!(*clip, generate_clip(&cfg, clip.seed).unwrap());
    }
}

#[test]
fn zero_speed_gives_a_still_clip() {
    let cfg = SynthConfig { max_speed: 0.0, ..small() };
    let clip = generate_clip(&cfg, 5).unwrap();
    for f in &clip.frames[1..] {
        assert_eq!(f, &clip.frames[0]);
    }
    for g in &clip.gt[1..] {
        assert_eq!(g, &clip.gt[0]);
    }
}

#[test]
fn ground_truth_masks_are_disjoint_and_connected() {
    let cfg = SynthConfig::default();
    for seed in 0..20 {
        let clip = generate_clip(&cfg, seed).unwrap();
        assert_eq!(clip.frames.len(), cfg.frames);
        for (frame, gt) in clip.frames.iter().zip(&clip.gt) {
            assert_eq!(frame.shape(), &[3, 128, 128]);
            assert!(frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut cover = vec![0.0; 16 * 16];
            for (m, &c) in gt.masks.iter().zip(&gt.categories) {
                assert_eq!(m.shape(), &[16, 16]);
                assert!(c < cfg.categories);
                assert!(is_connected(m), "seed {seed}");
                assert!(m.data().contains(&1.0));
                for (acc, v) in cover.iter_mut().zip(m.data()) {
                    *acc += v;
                }
            }
            assert!(cover.iter().all(|&v| v <= 1.0));
            let mut ids = gt.track_ids.clone();
            ids.dedup();
            assert_eq!(ids.len(), gt.len());
        }
    }
}

#[test]
fn impossible_configs_are_rejected() {
    let bad = [
        SynthConfig { size: 100, ..small() },
        SynthConfig { categories: 4, ..small() },
        SynthConfig { min_instances: 5, max_instances: 2, ..small() },
        SynthConfig { max_radius: 40.0, ..small() },
        SynthConfig { max_instances: 30, min_radius: 10.0, ..small() },
        SynthConfig { max_speed: -1.0, ..small() },
    ];
    for cfg in bad {
        assert!(matches!(generate_clip(&cfg, 0), Err(Error::Generation(_))), "{cfg:?}");
    }
}

#[test]
fn exported_clips_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let clip = generate_clip(&small(), 8).unwrap();
    export_clip(&clip, dir.path()).unwrap();
    let frames = load_frames(dir.path()).unwrap();
    assert_eq!(frames.len(), clip.frames.len());
    for (a, b) in frames.iter().zip(&clip.frames) {
        assert!(a.max_abs_diff(b) < 1e-6);
    }
    assert_eq!(rle::read_ground_truth(&dir.path().join(GT_FILE)).unwrap(), clip.gt);
    assert!(load_frames(&dir.path().join("missing")).is_err());
}

fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor {
    let mut m = Tensor::zeros(&[h, w]);
    for &(y, x) in on {
        m.set(&[y, x], 1.0);
    }
    m
}

fn row(y: usize) -> Vec<(usize, usize)> {
    (0..4).map(|x| (y, x)).collect()
}

fn scenario() -> (Vec<FramePrediction>, Vec<GroundTruth>) {
    let a = mask(4, 4, &row(0));
    let mut b_px = row(2);
    b_px.push((3, 0));
    let b = mask(4, 4, &b_px);
    let partial = mask(4, 4, &[(2, 0), (2, 1), (2, 2)]);
    let stray = mask(4, 4, &[(3, 3)]);
    let gt = GroundTruth { masks: vec![a.clone(), b.clone()], categories: vec![0, 1], track_ids: vec![1, 2] };
    let preds = vec![
        FramePrediction {
            track_ids: vec![1, 2, 3],
            categories: vec![0, 1, 0],
            scores: vec![0.9, 0.8, 0.95],
            masks: vec![a.clone(), partial, stray],
        },
        FramePrediction { track_ids: vec![1, 5], categories: vec![0, 1], scores: vec![0.9, 0.7], masks: vec![a, b] },
    ];
    (preds, vec![gt.clone(), gt])
}

#[test]
fn hand_computed_clip_metrics() {
    let (preds, gts) = scenario();
    let r = evaluate_clip(&preds, &gts).unwrap();
    assert!((r.mean_iou - 0.9).abs() < 1e-12);
    assert!((r.track_consistency - 0.5).abs() < 1e-12);
    assert!((r.ap_lite - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    assert_eq!((r.matched, r.misses, r.false_positives), (4, 0, 1));
    assert_eq!((r.gt_instances, r.predictions), (4, 5));
}

#[test]
fn prediction_order_does_not_matter() {
    let (preds, gts) = scenario();
    let base = evaluate_clip(&preds, &gts).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let shuffled: Vec<FramePrediction> = preds
            .iter()
            .map(|p| {
                let mut idx: Vec<usize> = (0..p.len()).collect();
                idx.shuffle(&mut r);
                FramePrediction {
                    track_ids: idx.iter().map(|&i| p.track_ids[i]).collect(),
                    categories: idx.iter().map(|&i| p.categories[i]).collect(),
                    scores: idx.iter().map(|&i| p.scores[i]).collect(),
                    masks: idx.iter().map(|&i| p.masks[i].clone()).collect(),
                }
            })
            .collect();
        assert_eq!(evaluate_clip(&shuffled, &gts).unwrap(), base);
    }
}

#[test]
fn perfect_and_empty_predictions() {
    let clip = generate_clip(&small(), 2).unwrap();
    let perfect: Vec<FramePrediction> = clip
        .gt
        .iter()
        .map(|g| FramePrediction {
            track_ids: g.track_ids.iter().map(|t| t + 100).collect(),
            categories: g.categories.clone(),
            scores: vec![1.0; g.len()],
            masks: g.masks.clone(),
        })
        .collect();
    let r = evaluate_clip(&perfect, &clip.gt).unwrap();
    assert_eq!((r.mean_iou, r.track_consistency, r.ap_lite), (1.0, 1.0, 1.0));
    assert_eq!((r.misses, r.false_positives), (0, 0));

    let none = vec![FramePrediction::empty(); clip.gt.len()];
    let r = evaluate_clip(&none, &clip.gt).unwrap();
    assert_eq!((r.mean_iou, r.track_consistency, r.ap_lite), (0.0, 0.0, 0.0));
    assert_eq!(r.misses, r.gt_instances);
    assert!(matches!(evaluate_clip(&none[1..], &clip.gt), Err(Error::Argument(_))));
}

#[test]
fn eleven_point_interpolation() {
    assert_eq!(eleven_point_ap(&[(0.9, true), (0.8, true)], 2), 1.0);
    assert_eq!(eleven_point_ap(&[], 3), 0.0);
    // Precision 1 up to recall 0.5, nothing beyond.
    let ap = eleven_point_ap(&[(0.9, true), (0.5, false)], 2);
    assert!((ap - 6.0 / 11.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rle_roundtrips(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, p in 0.0f64..1.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::from_vec(&[h, w], (0..h * w).map(|_| if r.random_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap();
        let runs = rle::encode(&m);
        prop_assert_eq!(rle::decode(h, w, &runs).unwrap(), m.clone());
        let rec = ResultRecord { frame: 3, track_id: seed % 50, category: 2, score: p, mask: m };
        let parsed = rle::parse_results(&rle::format_results(std::slice::from_ref(&rec))).unwrap();
        prop_assert_eq!(parsed, vec![rec]);
    }
}

#[test]
fn malformed_rle_is_rejected() {
    assert!(rle::decode(2, 2, "1,2").is_err());
    assert!(rle::decode(2, 2, "1,x,1").is_err());
    assert!(matches!(rle::parse_results("0 1 0 0.5 2 2"), Err(Error::Format(_))));
}
