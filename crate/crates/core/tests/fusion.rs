use loco_core::fusion::*;
use loco_core::synth::{self, VolumeSample};
use loco_core::{seed, Error, TaskId, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn gradient_volume(h: usize, w: usize, d: usize) -> Tensor {
    Tensor::from_fn([1, h, w, d], |i| ((i % d) as f64 + 0.5) / d as f64).unwrap()
}

fn truth(d: usize) -> Vec<f64> {
    (0..d).map(|z| (z as f64 + 0.5) / d as f64).collect()
}

fn flip_axial(t: &Tensor) -> Tensor {
    let d = *t.shape().last().unwrap();
    Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i - i % d + (d - 1 - i % d)]).unwrap()
}

fn random_probs(o: usize, shape: [usize; 3], s: u64, label: &str) -> Tensor {
    let mut rng = seed::rng(s, label);
    Tensor::from_fn([o, shape[0], shape[1], shape[2]], |_| rng.random_range(0.0..1.0)).unwrap()
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn body_axis_on_gradient_volume() {
    let v = gradient_volume(6, 5, 20);
    let scores = estimate_body_axis(&v).unwrap();
    let mae: f64 = scores.iter().zip(truth(20)).map(|(a, b)| (a - b).abs()).sum::<f64>() / 20.0;
    assert!(mae < 0.05, "{mae}");
    assert!(scores.windows(2).all(|w| w[0] <= w[1]));
    let mut flipped = estimate_body_axis(&flip_axial(&v)).unwrap();
    flipped.reverse();
    assert_eq!(flipped, scores);
    assert_eq!(estimate_body_axis(&gradient_volume(3, 3, 1)).unwrap().len(), 1);
    assert!(matches!(estimate_body_axis(&Tensor::zeros([3, 3, 3]).unwrap()), Err(Error::Dimension(_))));
}

#[test]
fn fitted_regressor_recovers_axial_position_on_synthetic_scans() {
    let recipes = synth::desk_sequence([32, 32, 16], 6, 11);
    let data: Vec<VolumeSample> = recipes.iter().flat_map(|r| synth::generate_dataset(r).unwrap()).collect();
    let (train, test) = data.split_at(12);
    let reg = BodyAxisRegressor::fit(&train.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    for s in test {
        let scores = reg.estimate(&s.image).unwrap();
        let mae: f64 = scores.iter().zip(truth(16)).map(|(a, b)| (a - b).abs()).sum::<f64>() / 16.0;
        assert!(mae < 0.05, "{mae}");
        let mut rev = reg.estimate(&flip_axial(&s.image)).unwrap();
        rev.reverse();
        assert_eq!(rev, scores);
    }
}

#[test]
fn isotonic_fit_is_monotone_and_pools() {
    assert_eq!(isotonic(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
    assert_eq!(isotonic(&[3.0, 2.0, 1.0]), vec![2.0, 2.0, 2.0]);
}

fn labelled(shape: [usize; 3], slices: &[usize]) -> VolumeSample {
    let [h, w, d] = shape;
    VolumeSample {
        image: gradient_volume(h, w, d),
        labels: Tensor::from_fn([1, h, w, d], |i| f64::from(slices.contains(&(i % d)))).unwrap(),
        class_names: names(&["x"]),
        spacing: [1.0; 3],
    }
}

#[test]
fn profiles_follow_the_foreground() {
    let reg = BodyAxisRegressor::default();
    let upper: Vec<usize> = (20..40).collect();
    let p = build_profile(TaskId(1), &[labelled([3, 3, 40], &upper)], &reg).unwrap();
    assert!(p.range.0 >= 0.5 - 1e-9 && p.range.1 <= 1.0, "{:?}", p.range);
    assert!((p.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let all: Vec<usize> = (0..40).collect();
    let p = build_profile(TaskId(1), &[labelled([3, 3, 40], &all)], &reg).unwrap();
    assert!((p.range.0 - 0.025).abs() < 0.02 && (p.range.1 - 0.975).abs() < 0.02, "{:?}", p.range);

    let p = build_profile(TaskId(1), &[labelled([3, 3, 40], &[10])], &reg).unwrap();
    assert!((p.range.1 - p.range.0 - MIN_RANGE_WIDTH).abs() < 1e-12);
    assert!(p.contains(10.5 / 40.0));

    assert!(matches!(
        build_profile(TaskId(1), &[labelled([3, 3, 40], &[])], &reg),
        Err(Error::DegenerateProfile(_))
    ));
}

#[test]
fn profile_text_round_trip() {
    let reg = BodyAxisRegressor::default();
    let p = build_profile(TaskId(3), &[labelled([2, 2, 17], &[3, 4, 5, 9])], &reg).unwrap();
    let back = BodyPartProfile::from_text(&p.to_text()).unwrap();
    assert_eq!(back, p);
    assert!(matches!(BodyPartProfile::from_text("loco-profile 1\ntask x"), Err(Error::Parse { .. })));
}

fn pred(task: u32, classes: &[&str], probs: Tensor) -> PredictionMap {
    PredictionMap::new(TaskId(task), names(classes), probs, [1.0; 3]).unwrap()
}

#[test]
fn masking_zeroes_exactly_the_out_of_range_slices() {
    let shape = [4, 3, 10];
    let p = pred(1, &["a", "b"], random_probs(2, shape, 5, "p"));
    let scores = truth(10);
    let full = BodyPartProfile::full(TaskId(1));
    assert_eq!(mask_out_of_range(&p, &full, &scores).unwrap().probs, p.probs);

    let upper = BodyPartProfile { range: (0.5, 1.0), ..full.clone() };
    let none = mask_out_of_range(&p, &upper, &[0.2; 10]).unwrap();
    assert!(none.probs.data().iter().all(|&v| v == 0.0));

    let m = mask_out_of_range(&p, &upper, &scores).unwrap();
    assert_eq!(m.masked_slices.iter().copied().collect::<Vec<_>>(), (0..5).collect::<Vec<_>>());
    for (i, (&a, &b)) in m.probs.data().iter().zip(p.probs.data()).enumerate() {
        if i % 10 < 5 {
            assert_eq!(a, 0.0);
        } else {
            assert_eq!(a, b);
        }
    }
    assert_eq!(mask_out_of_range(&m, &upper, &scores).unwrap(), m);
    assert!(matches!(mask_out_of_range(&p, &upper, &scores[..3]), Err(Error::Dimension(_))));
}

#[test]
fn entropy_selection_hand_cases() {
    let shape = [1, 1, 1];
    let one = |p: f64| Tensor::new([1, 1, 1, 1], vec![p]).unwrap();
    let f = entropy_ensemble(&[pred(1, &["e"], one(0.99)), pred(2, &["e"], one(0.6))]).unwrap();
    assert_eq!(f.winners[0][0], Some(TaskId(1)));
    assert!(f.masks[0].data[0]);
    let f = entropy_ensemble(&[pred(2, &["e"], one(0.3)), pred(1, &["e"], one(0.7))]).unwrap();
    assert_eq!(f.winners[0][0], Some(TaskId(1)));
    assert!(f.masks[0].data[0]);

    let p = random_probs(2, shape, 1, "single");
    let f = entropy_ensemble(&[pred(0, &["a", "b"], p.clone())]).unwrap();
    for c in 0..2 {
        assert_eq!(f.masks[c].data[0], p.data()[c] > 0.5);
    }
    assert!(matches!(entropy_ensemble(&[]), Err(Error::Contract(_))));
    let other = pred(1, &["a"], random_probs(1, [2, 1, 1], 1, "x"));
    assert!(matches!(entropy_ensemble(&[pred(0, &["a", "b"], p), other]), Err(Error::Dimension(_))));
}

#[test]
fn masked_claimants_do_not_vote() {
    let p0 = pred(0, &["e"], Tensor::new([1, 1, 1, 2], vec![0.9, 0.9]).unwrap());
    let p1 = pred(2, &["e"], Tensor::new([1, 1, 1, 2], vec![0.7, 0.7]).unwrap());
    let prof = BodyPartProfile { range: (0.5, 1.0), ..BodyPartProfile::full(TaskId(0)) };
    let masked = mask_out_of_range(&p0, &prof, &[0.25, 0.75]).unwrap();
    let f = entropy_ensemble(&[masked, p1]).unwrap();
    assert_eq!(f.winners[0], vec![Some(TaskId(2)), Some(TaskId(0))]);
    assert_eq!(f.masks[0].data, vec![true, true]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ensemble_matches_direct_entropy_oracle(s in any::<u64>(), tasks in 2usize..5) {
        let shape = [3, 4, 5];
        let n = 60;
        let preds: Vec<PredictionMap> = (0..tasks)
            .map(|t| {
                let classes: Vec<&str> = if t % 2 == 0 { vec!["shared", "own"] } else { vec!["other", "shared"] };
                let mut p = random_probs(2, shape, s, &format!("t{t}"));
                if t == 1 {
                    p = Tensor::from_fn(p.shape().to_vec(), |i| if i % 7 == 0 { 0.5 } else { p.data()[i] }).unwrap();
                }
                pred(t as u32, &classes, p)
            })
            .collect();
        let fused = entropy_ensemble(&preds).unwrap();
        let mut uniq = fused.classes.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), fused.classes.len());
        for p in &preds {
            for c in &p.class_names {
                prop_assert!(fused.classes.contains(c));
            }
        }
        let ci = fused.class_index("shared").unwrap();
        for v in 0..n {
            let mut best: Option<(f64, usize, f64)> = None;
            for (t, p) in preds.iter().enumerate() {
                let ch = p.class_names.iter().position(|c| c == "shared").unwrap();
                let pv = p.probs.data()[ch * n + v];
                let h = -pv * pv.ln() - (1.0 - pv) * (1.0 - pv).ln();
                if best.is_none_or(|(bh, _, _)| h < bh) {
                    best = Some((h, t, pv));
                }
            }
            let (_, t, pv) = best.unwrap();
            prop_assert_eq!(fused.winners[ci][v], Some(TaskId(t as u32)));
            prop_assert_eq!(fused.masks[ci].data[v], pv > 0.5);
        }

        let complemented: Vec<PredictionMap> = preds
            .iter()
            .map(|p| PredictionMap { probs: p.probs.map(|v| 1.0 - v), ..p.clone() })
            .collect();
        let fc = entropy_ensemble(&complemented).unwrap();
        prop_assert_eq!(&fc.winners[ci], &fused.winners[ci]);
    }
}
