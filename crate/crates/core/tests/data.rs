use ndarray::Array2;
use upgan::container::TensorFile;
use upgan::degrade::{
    load_image_dir, pairs_from_clean, pairs_from_dirs, procedural_pairs, subset_supervision, undersample_kspace,
    DatasetManifest, MaskShape, NormConstants, PhantomParams, Split,
};

fn unit() -> NormConstants {
    NormConstants { min: 0.0, max: 1.0 }
}

fn small() -> DatasetManifest {
    let params = PhantomParams {
        slices_per_subject: 3,
        ..PhantomParams::default()
    };
    procedural_pairs(8, (16, 16), &params, 1).unwrap()
}

#[test]
fn procedural_splits_are_subject_disjoint_and_normalized() {
    let m = small();
    assert!(m.splits.is_disjoint());
    let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| m.indices(s).len()).sum();
    assert_eq!(total, m.samples.len());
    for s in &m.samples {
        for map in [&s.input_a, &s.target_b] {
            let (lo, hi) = map.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(lo >= -1.0 - 1e-6 && hi <= 1.0 + 1e-6);
        }
    }
}

#[test]
fn manifest_save_load_round_trip() {
    let m = small();
    let dir = tempfile::tempdir().unwrap();
    let path = m.save(dir.path()).unwrap();
    let back = DatasetManifest::load(&path).unwrap();
    assert_eq!(back.samples.len(), m.samples.len());
    assert_eq!(back.splits, m.splits);
    for (a, b) in m.samples.iter().zip(&back.samples) {
        assert_eq!(a.input_a, b.input_a);
        assert_eq!(a.target_b, b.target_b);
        assert_eq!(a.norm_b, b.norm_b);
    }
}

#[test]
fn weak_supervision_subsets_only_the_training_split() {
    let m = small();
    let pool = m.splits.train.len();
    let sub = subset_supervision(&m, 2, 4).unwrap();
    assert_eq!(sub.splits.train.len(), 2);
    assert!(sub.splits.train.iter().all(|s| m.splits.train.contains(s)));
    assert_eq!(sub.splits.val, m.splits.val);
    assert_eq!(sub.splits.test, m.splits.test);
    assert_eq!(sub.indices(Split::Train).len(), 2 * 3);
    assert!(subset_supervision(&m, 0, 0).is_err());
    assert!(subset_supervision(&m, pool + 1, 0).is_err());
}

fn write_slices(dir: &std::path::Path, subjects: usize, f: impl Fn(usize, usize) -> Array2<f64>) {
    for s in 0..subjects {
        for k in 0..2 {
            TensorFile::from_map(&f(s, k)).write(&dir.join(format!("subj{s:02}_{k:03}.upg"))).unwrap();
        }
    }
}

#[test]
fn paired_directories_match_by_stem() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let img = |s: usize, k: usize| Array2::from_shape_fn((8, 8), |(i, j)| ((i * j + s + k) % 7) as f64 / 7.0);
    write_slices(a.path(), 4, img);
    write_slices(b.path(), 4, |s, k| img(s, k).mapv(|v| v * v));
    let (la, lb) = (load_image_dir(a.path()).unwrap(), load_image_dir(b.path()).unwrap());
    assert_eq!(la[3].subject_id, "subj01");
    assert_eq!(la[3].slice_index, 1);
    let m = pairs_from_dirs(&la, &lb, 0, unit()).unwrap();
    assert_eq!(m.samples.len(), 8);
    assert!(m.splits.is_disjoint());

    std::fs::remove_file(b.path().join("subj00_000.upg")).unwrap();
    let lb = load_image_dir(b.path()).unwrap();
    assert!(pairs_from_dirs(&la, &lb, 0, unit()).is_err());
}

#[test]
fn png_slices_load_into_unit_range_and_degrade() {
    let dir = tempfile::tempdir().unwrap();
    for s in 0..3 {
        let img = image::GrayImage::from_fn(16, 16, |x, y| image::Luma([((x * 16 + y + s * 5) % 256) as u8]));
        img.save(dir.path().join(format!("p{s}_000.png"))).unwrap();
    }
    let clean = load_image_dir(dir.path()).unwrap();
    assert!(clean.iter().all(|c| c.image.iter().all(|&v| (0.0..=1.0).contains(&v))));
    let m = pairs_from_clean("undersample", &clean, 2, unit(), |x, _| undersample_kspace(x, 0.25, MaskShape::default()))
        .unwrap();
    assert_eq!(m.samples.len(), 3);
    assert!(m.samples.iter().all(|s| s.input_a != s.target_b));
}
