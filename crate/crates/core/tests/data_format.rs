use std::fs;

use uniseg::data::{
    generate_dataset, generate_volume, load_manifest, preset_task_specs, read_volume, write_volume, Manifest, ShapeFamily,
    Split, TaskSpec, VolumeSample, MANIFEST_FILE,
};
use uniseg::{Error, Tensor};

fn small_spec(name: &str, ch: usize, k: usize, family: ShapeFamily, seed: u64) -> TaskSpec {
    TaskSpec {
        num_train: 4,
        num_test: 2,
        ..TaskSpec::new(name, ch, k, family, seed)
    }
}

fn sample() -> VolumeSample {
    let image = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32).sin() * 1e3 + f32::EPSILON * i as f32);
    let label = (0..60).map(|i| (i % 3) as u8).collect();
    VolumeSample::new(image, label, 3, 0).unwrap()
}

#[test]
fn volume_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.uvol");
    let s = sample();
    write_volume(&s, &path).unwrap();
    let r = read_volume(&path, 0).unwrap();
    assert!(r.image.bitwise_eq(&s.image));
    assert_eq!(r.label, s.label);
    assert_eq!(r.num_classes, 3);
    assert_eq!(fs::metadata(&path).unwrap().len() as usize, 26 + 2 * 60 * 4 + 60);
}

#[test]
fn header_layout_is_little_endian() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.uvol");
    write_volume(&sample(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"UVOL");
    assert_eq!(&bytes[4..6], &[1, 0]);
    let fields: Vec<u32> = bytes[6..26]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(fields, vec![2, 3, 4, 5, 3]);
    let first = f32::from_le_bytes(bytes[26..30].try_into().unwrap());
    assert_eq!(first.to_bits(), sample().image.data()[0].to_bits());
}

#[test]
fn truncated_volume_reports_byte_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.uvol");
    write_volume(&sample(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    let err = read_volume(&path, 0).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    let msg = err.to_string();
    let full = bytes.len().to_string();
    let short = (bytes.len() - 7).to_string();
    assert!(msg.contains(&full) && msg.contains(&short), "{msg}");
}

#[test]
fn bad_magic_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.uvol");
    write_volume(&sample(), &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_volume(&path, 0), Err(Error::Format { .. })));
}

#[test]
fn invalid_labels_are_rejected() {
    let image = Tensor::zeros(&[1, 2, 2, 2]);
    let err = VolumeSample::new(image, vec![0, 1, 2, 0, 0, 0, 0, 0], 2, 0).unwrap_err();
    assert!(matches!(err, Error::Label(_)));
    assert!(err.to_string().contains("voxel 2"));
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let specs = vec![
        small_spec("a", 1, 2, ShapeFamily::Spheres, 3),
        small_spec("b", 4, 3, ShapeFamily::Tubes, 4),
    ];
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = generate_dataset(&specs, 9, d1.path()).unwrap();
    let m2 = generate_dataset(&specs, 9, d2.path()).unwrap();
    assert_eq!(m1.records, m2.records);
    assert_eq!(
        fs::read(d1.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(d2.path().join(MANIFEST_FILE)).unwrap()
    );
    for r in &m1.records {
        assert_eq!(fs::read(m1.resolve(r)).unwrap(), fs::read(m2.resolve(r)).unwrap());
    }
}

#[test]
fn three_class_volumes_contain_every_foreground_class() {
    for family in [ShapeFamily::Spheres, ShapeFamily::Boxes, ShapeFamily::Tubes] {
        let spec = TaskSpec::new("t", 1, 3, family, 21);
        let n = 40;
        let mut complete = 0;
        for i in 0..n {
            let v = generate_volume(&spec, i, 0).unwrap();
            let has = |c: u8| v.label.iter().any(|&l| l == c);
            if has(1) && has(2) {
                complete += 1;
            }
        }
        assert!(complete as f64 >= 0.9 * n as f64, "{family}: {complete}/{n}");
    }
}

#[test]
fn generated_volumes_respect_spec_invariants() {
    for spec in preset_task_specs(6, 5) {
        for i in 0..5 {
            let v = generate_volume(&spec, i, 2).unwrap();
            assert_eq!(v.channels(), spec.in_channels);
            assert_eq!(v.dims(), spec.dims);
            assert_eq!(v.task_id, 2);
            assert!(v.label.iter().all(|&l| (l as usize) < spec.num_classes));
            assert!(v.image.is_finite());
            let fg = v.label.iter().filter(|&&l| l > 0).count() as f64 / v.label.len() as f64;
            assert!((0.005..=0.30).contains(&fg), "{}: foreground fraction {fg}", spec.name);
        }
    }
}

#[test]
fn higher_class_wins_overlap() {
    // Intensities are exact copies of the class contrast when noise is off.
    let spec = TaskSpec {
        noise_sigma: 0.0,
        ..TaskSpec::new("t", 1, 5, ShapeFamily::Spheres, 2)
    };
    let v = generate_volume(&spec, 0, 0).unwrap();
    for (l, x) in v.label.iter().zip(v.image.data()) {
        assert_eq!(*x, *l as f32);
    }
}

#[test]
fn spec_validation() {
    let mut s = TaskSpec::new("t", 3, 2, ShapeFamily::Boxes, 0);
    assert!(matches!(s.validate(), Err(Error::UnsupportedModality(3))));
    s.in_channels = 2;
    s.dims = [8, 32, 32];
    assert!(s.validate().is_err());
    s.dims = [16, 16, 16];
    s.num_train = 0;
    assert!(s.validate().is_err());
    s.num_train = 1;
    s.validate().unwrap();
}

#[test]
fn empty_manifest_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    fs::write(&path, "UMAN 1 0\n").unwrap();
    let m = load_manifest(&path).unwrap();
    assert!(m.records.is_empty());
    assert!(m.load_split(Split::Train).unwrap().is_empty());
}

#[test]
fn missing_volume_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    fs::write(&path, "UMAN 1 0\nt/ghost.uvol\t0\ttrain\n").unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(err, Error::Manifest(_)));
    assert!(err.to_string().contains("ghost.uvol"));
}

#[test]
fn split_filter_and_registry() {
    let specs = vec![
        small_spec("a", 1, 2, ShapeFamily::Spheres, 1),
        small_spec("b", 2, 5, ShapeFamily::Boxes, 2),
    ];
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&specs, 1, dir.path()).unwrap();
    let m = load_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
    let train: Vec<_> = m.split(Split::Train).collect();
    assert_eq!(train.len(), 8);
    assert!(train.iter().all(|r| r.split == Split::Train));
    assert_eq!(m.split(Split::Test).count(), 4);
    let reg = m.registry().unwrap();
    assert_eq!(reg.len(), 2);
    assert_eq!(reg.tasks()[1].name, "b");
    assert_eq!(reg.tasks()[1].in_channels, 2);
    assert_eq!(reg.max_classes(), 5);
    let grouped = m.load_split(Split::Test).unwrap();
    assert_eq!(grouped.len(), 2);
    assert!(grouped[1].iter().all(|s| s.task_id == 1 && s.channels() == 2));
}

#[test]
fn manifest_text_round_trip() {
    let text = "UMAN 1 42\na/x.uvol\t0\ttrain\nb/y.uvol\t1\ttest\n";
    let m = Manifest::parse(text, "root").unwrap();
    assert_eq!(m.seed, 42);
    assert_eq!(m.to_text(), text);
    assert!(Manifest::parse("UMAN 2 0\n", "").is_err());
    assert!(Manifest::parse("UMAN 1 0\na\t0\tvalid\n", "").is_err());
}
