use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repcount::datasets::*;
use repcount::video::{write_video_frames, CountRecord, VideoTensor};
use repcount::Error;

const HEADER: &str = "video_id,class,clip_start,clip_end,rep_start,rep_end,count,split\n";

#[test]
fn countix_single_row() {
    let csv = format!("{HEADER}abc,jumping jacks,0.0,10.0,1.5,8.0,5,train\n");
    let parsed = parse_countix_str(&csv).unwrap();
    assert!(parsed.invalid.is_empty());
    assert_eq!(parsed.records.len(), 1);
    let r = &parsed.records[0];
    assert_eq!(r.video_id, "abc");
    assert_eq!(r.kinetics_class, "jumping jacks");
    assert_eq!(r.count, 5);
    assert_eq!(r.repetition, (1.5, 8.0));
    assert_eq!(r.split, Split::Train);
}

#[test]
fn countix_invalid_rows_are_reported() {
    let csv = format!(
        "{HEADER}a,x,0,10,1,11,5,train\nb,x,0,10,1,9,1,val\nc,x,0,10,1,9,many,test\nd,x,0,10,2,3,3,test\n"
    );
    let parsed = parse_countix_str(&csv).unwrap();
    assert_eq!(parsed.records.len(), 1);
    assert_eq!(parsed.records[0].video_id, "d");
    let lines: Vec<usize> = parsed.invalid.iter().map(|e| e.line).collect();
    assert_eq!(lines, vec![2, 3, 4]);
}

#[test]
fn countix_missing_column() {
    let csv = "video_id,class,clip_start,clip_end,rep_start,rep_end,split\na,x,0,1,0,1,train\n";
    assert!(matches!(parse_countix_str(csv), Err(Error::Schema(_))));
}

#[test]
fn countix_file_not_found() {
    let err = parse_countix(std::path::Path::new("/nonexistent/countix.csv")).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)));
}

fn marks(spec: &[((f64, f64), u32)]) -> Vec<AnnotatorMark> {
    spec.iter()
        .enumerate()
        .map(|(i, &(seg, c))| AnnotatorMark::new(format!("a{i}"), seg, c).unwrap())
        .collect()
}

#[test]
fn aggregation_takes_medians() {
    let m = marks(&[((1.0, 5.0), 4), ((1.2, 5.1), 5), ((0.9, 4.8), 6)]);
    let Aggregation::Accepted(a) = aggregate_annotations(&m, DEFAULT_IOU_MIN).unwrap() else {
        panic!("overlapping marks were rejected");
    };
    assert_eq!(a.count, 5);
    assert_eq!(a.segment, (1.0, 5.0));
}

#[test]
fn aggregation_identity_and_rejection() {
    let m = marks(&[((2.0, 6.0), 7); 3]);
    let Aggregation::Accepted(a) = aggregate_annotations(&m, DEFAULT_IOU_MIN).unwrap() else {
        panic!("identical marks were rejected");
    };
    assert_eq!((a.segment, a.count, a.min_iou), ((2.0, 6.0), 7, 1.0));

    let m = marks(&[((0.0, 1.0), 3), ((2.0, 3.0), 3), ((0.0, 1.0), 3)]);
    assert!(matches!(
        aggregate_annotations(&m, DEFAULT_IOU_MIN).unwrap(),
        Aggregation::Rejected { min_iou } if min_iou == 0.0
    ));
    assert!(matches!(aggregate_annotations(&m[..2], 0.5), Err(Error::InvalidInput(_))));
}

#[test]
fn aggregation_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let m: Vec<AnnotatorMark> = (0..3)
            .map(|i| {
                let s = rng.random_range(0.0..2.0);
                let e = s + rng.random_range(3.0..6.0);
                AnnotatorMark::new(format!("a{i}"), (s, e), rng.random_range(2..20)).unwrap()
            })
            .collect();
        let base = aggregate_annotations(&m, 0.3).unwrap();
        for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0]] {
            let p: Vec<AnnotatorMark> = perm.iter().map(|&i| m[i].clone()).collect();
            assert_eq!(aggregate_annotations(&p, 0.3).unwrap(), base);
        }
        if let Aggregation::Accepted(a) = base {
            let lo = m.iter().map(|x| x.segment.0).fold(f64::INFINITY, f64::min);
            let hi = m.iter().map(|x| x.segment.1).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= a.segment.0 && a.segment.1 <= hi);
        }
    }
}

#[test]
fn segment_iou_values() {
    assert_eq!(segment_iou((0.0, 2.0), (1.0, 3.0)), 1.0 / 3.0);
    assert_eq!(segment_iou((0.0, 1.0), (1.0, 2.0)), 0.0);
    assert_eq!(segment_iou((0.0, 4.0), (0.0, 4.0)), 1.0);
}

fn write_quva(dir: &std::path::Path, rows: &[(&str, u32, usize)]) {
    let mut csv = String::from("filename,count\n");
    for &(name, count, frames) in rows {
        let v = VideoTensor::new(frames, 4, 4, 10.0, vec![0.5; frames * 48]).unwrap();
        write_video_frames(&v, &dir.join(name)).unwrap();
        csv.push_str(&format!("{name},{count}\n"));
    }
    std::fs::write(dir.join(QUVA_ANNOTATIONS), csv).unwrap();
}

#[test]
fn quva_loading() {
    let tmp = tempfile::tempdir().unwrap();
    write_quva(tmp.path(), &[("clip_a", 4, 20), ("clip_b", 9, 30)]);
    let records = load_quva(tmp.path()).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0].count, 4);
    assert_eq!(records[0].segment, (0.0, 2.0));
    assert_eq!(records[1].video_ref, "clip_b");
    let v = load_record_video(tmp.path(), &records[1], None).unwrap();
    assert_eq!(v.num_frames(), 30);
}

#[test]
fn quva_missing_video() {
    let tmp = tempfile::tempdir().unwrap();
    write_quva(tmp.path(), &[("clip_a", 4, 5)]);
    std::fs::write(tmp.path().join(QUVA_ANNOTATIONS), "filename,count\nclip_a,4\nmissing,5\n").unwrap();
    assert!(matches!(load_quva(tmp.path()), Err(Error::NotFound(_))));
    assert!(matches!(load_quva(&tmp.path().join("nope")), Err(Error::NotFound(_))));
}

#[test]
fn stats_examples() {
    let one = [CountRecord::new("v", (1.0, 7.0), 4).unwrap()];
    let s = dataset_stats(&one).unwrap();
    assert_eq!((s.duration.mean, s.count.mean), (6.0, 4.0));

    let two = [
        CountRecord::new("a", (0.0, 1.0), 2).unwrap(),
        CountRecord::new("b", (0.0, 3.0), 4).unwrap(),
    ];
    let s = dataset_stats(&two).unwrap();
    assert_eq!(s.count.mean, 3.0);
    assert_eq!(s.count.std, 1.0);
    assert_eq!((s.count.min, s.count.max), (2.0, 4.0));
    assert!(matches!(dataset_stats::<CountRecord>(&[]), Err(Error::EmptyDataset)));
}

#[test]
fn stats_split_sizes() {
    let csv = format!("{HEADER}a,x,0,10,1,9,5,train\nb,x,0,10,1,9,3,train\nc,x,0,10,1,9,4,val\nd,x,0,10,1,9,2,test\n");
    let s = dataset_stats(&parse_countix_str(&csv).unwrap().records).unwrap();
    assert_eq!((s.num_videos, s.train, s.val, s.test), (4, 2, 1, 1));
}

#[test]
fn blinking_scene_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (v, l) = scene(SceneKind::Blinking, 8.0, 64, 16, 16, 30.0, &mut rng);
    assert_eq!(v.num_frames(), 64);
    assert!(l.periodicity.iter().all(|&p| p));
    assert!(l.period_length.iter().all(|&p| p == 8));
}

#[test]
fn static_scene_is_not_periodic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (v, l) = scene(SceneKind::Static, 8.0, 20, 16, 16, 30.0, &mut rng);
    assert!(l.periodicity.iter().all(|&p| !p));
    assert!((1..20).all(|t| v.frame(t) == v.frame(0)));
}

#[test]
fn orbiting_scene_repeats_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (v, _) = scene(SceneKind::Orbiting, 10.0, 40, 24, 24, 30.0, &mut rng);
    for t in 0..30 {
        assert_eq!(v.frame(t), v.frame(t + 10));
    }
    assert_ne!(v.frame(0), v.frame(5));
}

#[test]
fn procedural_corpus_is_exactly_periodic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ProceduralConfig::default();
    let corpus = procedural_corpus(12, &mut rng, &cfg).unwrap();
    assert_eq!(corpus.len(), 12);
    for (v, l) in &corpus {
        l.validate().unwrap();
        assert_eq!(l.len(), v.num_frames());
        if let Some(&p) = l.period_length.iter().find(|&&p| p > 0) {
            let p = p as usize;
            for t in 0..v.num_frames() - p {
                assert_eq!(v.frame(t), v.frame(t + p));
            }
        }
    }
    assert!(procedural_corpus(0, &mut rng, &cfg).is_err());
}
