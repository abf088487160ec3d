use cl_lab_core::data::*;
use cl_lab_core::linalg::{effective_rank, gaussian_matrix, haar_orthogonal, singular_values, Mat};
use cl_lab_core::rng::rng_from_seed;
use cl_lab_core::LabError;
use proptest::prelude::*;

fn idx_bytes(type_code: u8, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, type_code, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(body);
    b
}

#[test]
fn idx_images_fixture() {
    let body: Vec<u8> = (0..2 * 784).map(|k| (k % 256) as u8).collect();
    let m = parse_idx(&idx_bytes(8, &[2, 28, 28], &body)).unwrap();
    assert_eq!(m.shape(), (784, 2));
    for j in 0..2 {
        for i in 0..784 {
            assert_eq!(m[(i, j)], ((j * 784 + i) % 256) as f64 / 255.0);
        }
    }
}

#[test]
fn idx_labels_fixture() {
    let bytes = idx_bytes(8, &[2], &[3, 7]);
    let m = parse_idx(&bytes).unwrap();
    assert_eq!(m, Mat::from_row_slice(1, 2, &[3.0, 7.0]));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.idx");
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(load_idx_labels(&path).unwrap(), vec![3, 7]);
}

#[test]
fn idx_rejects_bad_input() {
    assert!(matches!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]), Err(LabError::Parse { .. })));
    assert!(matches!(parse_idx(&idx_bytes(8, &[3], &[1, 2])), Err(LabError::Parse { .. })));
    assert!(matches!(parse_idx(&idx_bytes(0x0d, &[1], &[1])), Err(LabError::Parse { .. })));
    assert!(parse_idx(&[0, 0]).is_err());
}

#[test]
fn whitening_examples() {
    let mut rng = rng_from_seed(1);
    let x0 = gaussian_matrix(8, 64, 1.0, &mut rng);
    let x = whiten(&x0, 0.01, &mut rng).unwrap();
    assert!(whitening_error(&x) <= 1e-6 * 8f64.sqrt());
    let twice = whiten(&x, 0.0, &mut rng).unwrap();
    assert!((twice - &x).norm() <= 1e-6);
    let row = Mat::from_row_slice(1, 2, &[3.0, 4.0]);
    let w = whiten(&row, 0.0, &mut rng).unwrap();
    assert!((w - Mat::from_row_slice(1, 2, &[0.6, 0.8])).norm() < 1e-12);
    assert!(whiten(&gaussian_matrix(4, 3, 1.0, &mut rng), 0.0, &mut rng).is_err());
    assert!(matches!(
        whiten(&Mat::zeros(3, 5), 0.0, &mut rng),
        Err(LabError::SingularCovariance(_))
    ));
}

#[test]
fn rotation_preserves_labels_and_whitening() {
    let mut rng = rng_from_seed(2);
    let old = synth_teacher_task(6, 24, 2, 0.0, &mut rng).unwrap();
    let same = rotate_task_with(&old, Mat::identity(6, 6)).unwrap();
    assert_eq!(same.new.inputs(), old.inputs());
    let pair = rotate_task(&old, &mut rng).unwrap();
    assert_eq!(pair.new.labels(), old.labels());
    assert!(whitening_error(pair.new.inputs()) <= 1e-6 * 6f64.sqrt());
    let a = singular_values(old.inputs()).unwrap();
    let b = singular_values(pair.new.inputs()).unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!((x - y).abs() < 1e-10);
    }
    assert!(rotate_task_with(&old, Mat::identity(5, 5)).is_err());
}

#[test]
fn label_helpers() {
    let labels: Vec<usize> = (0..10).collect();
    assert_eq!(modulo_rank_labels(&labels, 10).unwrap(), labels);
    assert_eq!(
        modulo_rank_labels(&labels, 2).unwrap(),
        vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]
    );
    assert!(modulo_rank_labels(&labels, 0).is_err());
    let e = embed_labels(&[2], 4).unwrap();
    assert_eq!(e, Mat::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 0.0]));
    assert_eq!(embed_labels(&[], 4).unwrap().shape(), (4, 0));
    let e = embed_labels(&[0, 1], 3).unwrap();
    assert_eq!(e, Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
    assert!(embed_labels(&[4], 4).is_err());
}

#[test]
fn rank_one_labels_collapse_target_erank() {
    let mut rng = rng_from_seed(3);
    let raw = gaussian_matrix(20, 200, 1.0, &mut rng);
    let classes: Vec<usize> = (0..200).map(|k| k % 10).collect();
    let t = rank_controlled_task(&raw, &classes, 8, 1, 0.01, &mut rng).unwrap();
    let target = t.target_map(1e-9).unwrap();
    let e = effective_rank(&(&target * target.transpose())).unwrap();
    assert!(e < 1.0 + 1e-9, "erank {e}");
    let t5 = rank_controlled_task(&raw, &classes, 8, 5, 0.01, &mut rng).unwrap();
    let target = t5.target_map(1e-9).unwrap();
    assert_eq!(singular_values(&target).unwrap().values().iter().filter(|s| **s > 1e-9).count(), 5);
}

#[test]
fn teacher_task_examples() {
    let mut rng = rng_from_seed(4);
    let full = synth_teacher_task(6, 30, 6, 0.0, &mut rng).unwrap();
    let sv = singular_values(&full.target_map(1e-9).unwrap()).unwrap();
    assert!(sv.values().iter().all(|s| (s - 1.0).abs() < 1e-9));
    let r1 = synth_teacher_task(6, 30, 1, 0.0, &mut rng).unwrap();
    let t = r1.target_map(1e-9).unwrap();
    assert!(effective_rank(&(&t * t.transpose())).unwrap() <= 1.05);
    let a = synth_teacher_task(5, 20, 2, 0.1, &mut rng_from_seed(9)).unwrap();
    let b = synth_teacher_task(5, 20, 2, 0.1, &mut rng_from_seed(9)).unwrap();
    assert_eq!(task_to_bytes(&a), task_to_bytes(&b));
    assert!(synth_teacher_task(5, 20, 6, 0.0, &mut rng).is_err());
    assert!(synth_teacher_task(5, 4, 2, 0.0, &mut rng).is_err());
}

#[test]
fn task_file_round_trip() {
    let mut rng = rng_from_seed(5);
    let mut t = synth_teacher_task(4, 10, 2, 0.05, &mut rng).unwrap();
    t.meta.seed = 77;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.clt");
    save_task(&t, &path).unwrap();
    let back = load_task(&path).unwrap();
    assert_eq!(back.inputs(), t.inputs());
    assert_eq!(back.labels(), t.labels());
    assert_eq!(back.meta, t.meta);
    assert_eq!(task_to_bytes(&back), task_to_bytes(&t));
}

#[test]
fn task_file_corruption_is_detected() {
    let mut rng = rng_from_seed(6);
    let t = synth_teacher_task(3, 6, 1, 0.0, &mut rng).unwrap();
    let bytes = task_to_bytes(&t);
    let mut flipped = bytes.clone();
    flipped[40] ^= 0x10;
    assert!(matches!(task_from_bytes(&flipped), Err(LabError::Checksum { .. })));
    let mut bumped = bytes.clone();
    bumped[4] = 2;
    assert!(matches!(
        task_from_bytes(&bumped),
        Err(LabError::Version { found: 2, expected: 1 })
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(task_from_bytes(&magic), Err(LabError::Parse { .. })));
    assert!(task_from_bytes(&bytes[..bytes.len() - 9]).is_err());
    assert!(matches!(load_task(std::path::Path::new("/nonexistent/t.clt")), Err(LabError::Io { .. })));
}

#[test]
fn task_requires_matching_columns() {
    let x = Mat::identity(3, 3);
    let y = Mat::zeros(3, 4);
    assert!(matches!(Task::new(x, y, TaskMeta::default()), Err(LabError::DimensionMismatch(_))));
}

#[test]
fn whitened_flag_is_validated() {
    let mut rng = rng_from_seed(7);
    let x = gaussian_matrix(3, 12, 1.0, &mut rng);
    let meta = TaskMeta { whitened: true, ..TaskMeta::default() };
    assert!(matches!(Task::new(x, Mat::zeros(3, 12), meta), Err(LabError::NotWhitened(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_preserves_target_erank(seed in 0u64..500) {
        let mut rng = rng_from_seed(seed);
        let old = synth_teacher_task(5, 20, 3, 0.2, &mut rng).unwrap();
        let u = haar_orthogonal(5, &mut rng);
        let pair = rotate_task_with(&old, u).unwrap();
        let t1 = old.target_map(1e-9).unwrap();
        let t2 = pair.new.target_map(1e-9).unwrap();
        let e1 = effective_rank(&(&t1 * t1.transpose())).unwrap();
        let e2 = effective_rank(&(&t2 * t2.transpose())).unwrap();
        prop_assert!((e1 - e2).abs() < 1e-8);
    }

    #[test]
    fn task_bytes_round_trip(seed in 0u64..500, d in 1usize..5, extra in 0usize..6) {
        let mut rng = rng_from_seed(seed);
        let x = gaussian_matrix(d, d + extra, 1.0, &mut rng);
        let y = gaussian_matrix(2, d + extra, 1.0, &mut rng);
        let t = Task::new(x, y, TaskMeta { name: format!("p{seed}"), seed, ..TaskMeta::default() }).unwrap();
        let back = task_from_bytes(&task_to_bytes(&t)).unwrap();
        prop_assert_eq!(back.inputs(), t.inputs());
        prop_assert_eq!(back.labels(), t.labels());
        prop_assert_eq!(back.meta, t.meta);
    }
}
