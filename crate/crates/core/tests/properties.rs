use ftcl::dataio::{generate, load_dataset, save_dataset, SyntheticSpec};
use ftcl::dp_kernels::{fsd_backward, fsd_forward, FsdInputs, SmoothMaxMode};
use ftcl::evalkit::{average_precision, GtSegment};
use ftcl::localization::{nms, t_iou, Detection, Proposal};
use ftcl::tensor::Matrix;
use proptest::prelude::*;

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..50.0, 0.5f64..20.0).prop_map(|(s, len)| (s, s + len))
}

fn detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((interval(), 0.0f64..1.0, 0usize..3), 0..12).prop_map(|v| {
        v.into_iter()
            .map(|((s, e), score, vid)| Detection {
                video_id: format!("v{vid}"),
                t_start: s,
                t_end: e,
                class_id: 0,
                score,
            })
            .collect()
    })
}

fn ground_truth() -> impl Strategy<Value = Vec<GtSegment>> {
    prop::collection::vec((interval(), 0usize..3), 1..6).prop_map(|v| {
        v.into_iter()
            .map(|((s, e), vid)| GtSegment {
                video_id: format!("v{vid}"),
                t_start: s,
                t_end: e,
                class_id: 0,
            })
            .collect()
    })
}

fn mat(r: usize, c: usize, v: &[f64]) -> Matrix {
    Matrix::from_vec(r, c, v[..r * c].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn ap_non_increasing_in_threshold(dets in detections(), gts in ground_truth()) {
        let mut prev = f64::INFINITY;
        for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let ap = average_precision(&dets, &gts, thr).ap;
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(ap <= prev + 1e-12);
            prev = ap;
        }
    }

    #[test]
    fn ap_depends_only_on_ranking(dets in detections(), gts in ground_truth()) {
        let rescaled: Vec<Detection> = dets
            .iter()
            .map(|d| Detection { score: 3.0 * d.score.powi(3) + 1.0, ..d.clone() })
            .collect();
        prop_assert_eq!(average_precision(&dets, &gts, 0.5).ap, average_precision(&rescaled, &gts, 0.5).ap);
    }

    #[test]
    fn t_iou_symmetric_and_bounded(a in interval(), b in interval()) {
        let x = t_iou(a, b).unwrap();
        prop_assert_eq!(x, t_iou(b, a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn nms_keeps_sorted_non_overlapping_subset(
        raw in prop::collection::vec((interval(), 0.0f64..1.0, 0usize..2), 0..15),
        thr in 0.1f64..1.0,
    ) {
        let props: Vec<Proposal> = raw
            .into_iter()
            .map(|((s, e), score, c)| Proposal { t_start: s, t_end: e, class_id: c, score })
            .collect();
        let kept = nms(&props, thr);
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
        prop_assert!(kept.iter().all(|k| props.contains(k)));
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(t_iou((a.t_start, a.t_end), (b.t_start, b.t_end)).unwrap() < thr);
                }
            }
        }
    }

    #[test]
    fn fsd_gradient_matches_central_difference(
        m in 1usize..5, n in 1usize..5,
        vals in prop::collection::vec(-1.0f64..1.0, 48),
        cell in 0usize..16,
    ) {
        let mode = SmoothMaxMode::Normalized { gamma: 10.0 };
        let x = FsdInputs::new(mat(m, n, &vals), mat(m, n, &vals[16..]), mat(m, n, &vals[32..])).unwrap();
        let grad = fsd_backward(&fsd_forward(&x, mode).unwrap(), 1.0).unwrap();
        let (i, j) = ((cell / n) % m, cell % n);
        let eps = 1e-5;
        let score = |d: f64| {
            let mut y = x.clone();
            y.g[(i, j)] += d;
            fsd_forward(&y, mode).unwrap().score
        };
        let fd = (score(eps) - score(-eps)) / (2.0 * eps);
        prop_assert!((fd - grad.g[(i, j)]).abs() < 1e-6, "fd {} analytic {}", fd, grad.g[(i, j)]);
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let spec = SyntheticSpec {
        n_train: 5,
        n_test: 3,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(dir.path(), "test", &data.test).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back.n_classes, data.test.n_classes);
    assert_eq!(back.videos.len(), data.test.videos.len());
    for (a, b) in back.videos.iter().zip(&data.test.videos) {
        assert_eq!(a.video_id, b.video_id);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.segments, b.segments);
        // features are stored as f32
        for (x, y) in a.features.as_slice().iter().zip(b.features.as_slice()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    assert!(data.train.videos.iter().all(|t| data.test.videos.iter().all(|v| v.video_id != t.video_id)));
}
