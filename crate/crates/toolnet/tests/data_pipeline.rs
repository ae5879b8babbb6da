use std::fs;
use std::path::Path;

use toolnet::data::{
    self, denormalize, generate_synthetic, normalize, one_hot, read_gray_png, read_rgb_png, render_sample, split_dataset,
    write_gray_png, write_rgb_png, DataError, GrayImage, Manifest, RgbImage, Split,
};
use toolnet_core::metrics::argmax_mask;

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_for_identical_inputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_synthetic(6, 11, (64, 64), a.path()).unwrap();
    let mb = generate_synthetic(6, 11, (64, 64), b.path()).unwrap();
    ma.save(&a.path().join("manifest.txt")).unwrap();
    mb.save(&b.path().join("manifest.txt")).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(
        fs::read(a.path().join("manifest.txt")).unwrap(),
        fs::read(b.path().join("manifest.txt")).unwrap()
    );
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(6, 12, (64, 64), c.path()).unwrap();
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
}

#[test]
fn foreground_fraction_stays_in_bounds() {
    for (h, w) in [(64, 64), (64, 96), (96, 64), (32, 32)] {
        for i in 0..40 {
            let s = render_sample(3, i, h, w).unwrap();
            assert_eq!((s.image.width, s.image.height), (w, h));
            assert_eq!((s.mask.width, s.mask.height), (w, h));
            assert!(s.mask.data.iter().all(|v| *v == 0 || *v == 255));
            let fg = s.mask.data.iter().filter(|v| **v == 255).count() as f64 / (h * w) as f64;
            assert!((0.02..=0.40).contains(&fg), "{h}x{w} frame {i}: {fg}");
        }
    }
}

#[test]
fn sizes_must_be_multiples_of_32() {
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(generate_synthetic(2, 0, (64, 40), d.path()), Err(DataError::BadSize { h: 64, w: 40 })));
    assert!(generate_synthetic(0, 0, (64, 64), d.path()).is_err());
}

#[test]
fn manifest_lists_every_frame_and_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let m = generate_synthetic(4, 5, (64, 64), d.path()).unwrap();
    assert_eq!(m.entries.len(), 4);
    let path = d.path().join("manifest.txt");
    m.save(&path).unwrap();
    let back = Manifest::load(&path).unwrap();
    assert_eq!(back.entries, m.entries);
    assert_eq!(back.means, m.means);
    for e in &back.entries {
        let s = back.load_sample(e).unwrap();
        assert_eq!(s.id, e.id);
    }
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("mean_r = "));
    assert_eq!(text.lines().filter(|l| l.split('\t').count() == 4).count(), 4);
}

#[test]
fn manifest_parse_errors() {
    let root = Path::new("/data");
    let header = "mean_r = 0.1\nmean_g = 0.2\nmean_b = 0.3\n";
    assert!(Manifest::parse(&format!("{header}a\tx.png\ty.png\ttrain\n"), root).is_ok());
    assert!(Manifest::parse("a\tx.png\ty.png\ttrain\n", root).is_err());
    assert!(Manifest::parse(&format!("{header}a\tx.png\ty.png\tholdout\n"), root).is_err());
    assert!(Manifest::parse(&format!("{header}a\tx.png\ty.png\n"), root).is_err());
    let dup = format!("{header}a\tx.png\ty.png\ttrain\na\tz.png\tw.png\ttest\n");
    assert!(Manifest::parse(&dup, root).unwrap_err().to_string().contains("duplicate"));
}

fn mask(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> GrayImage {
    GrayImage {
        width: w,
        height: h,
        data: (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect(),
    }
}

#[test]
fn one_hot_examples() {
    let zeros = one_hot(&mask(4, 3, |_, _| 0)).unwrap();
    assert_eq!(zeros.shape().dims(), [1, 2, 3, 4]);
    assert!(zeros.data()[..12].iter().all(|v| *v == 1.0));
    assert!(zeros.data()[12..].iter().all(|v| *v == 0.0));
    let ones = one_hot(&mask(4, 3, |_, _| 255)).unwrap();
    assert!(ones.data()[..12].iter().all(|v| *v == 0.0));
    assert!(ones.data()[12..].iter().all(|v| *v == 1.0));
    let checker = mask(6, 5, |y, x| if (x + y) % 2 == 0 { 255 } else { 0 });
    let t = one_hot(&checker).unwrap();
    for p in 0..30 {
        assert_eq!(t.data()[p] + t.data()[30 + p], 1.0);
    }
    assert_eq!(argmax_mask(&t).unwrap(), checker.to_mask().unwrap());
    let bad = mask(3, 1, |_, x| [0, 7, 128][x]);
    let err = one_hot(&bad).unwrap_err();
    assert!(matches!(&err, DataError::NonBinaryMask(v) if v == &vec![7, 128]));
    assert!(err.to_string().contains("7") && err.to_string().contains("128"));
}

#[test]
fn normalization_anchors_and_round_trip() {
    let means = [0.6, 0.25, 0.3];
    let img = RgbImage {
        width: 2,
        height: 1,
        data: vec![0, 0, 0, 255, 255, 255],
    };
    let t = normalize(&img, &means);
    for (c, m) in means.iter().enumerate() {
        assert_eq!(t.at(0, c, 0, 0), -m);
        assert!((t.at(0, c, 0, 1) - (1.0 - m)).abs() < 1e-15);
    }
    let s = render_sample(9, 0, 64, 64).unwrap();
    let t = normalize(&s.image, &means);
    let back = denormalize(&t, &means).unwrap();
    assert_eq!(back, s.image);
    for (a, b) in t.data().iter().zip(normalize(&back, &means).data()) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }
}

#[test]
fn png_codec_is_lossless_and_reports_paths() {
    let d = tempfile::tempdir().unwrap();
    let s = render_sample(2, 1, 64, 96).unwrap();
    let ip = d.path().join("i.png");
    let mp = d.path().join("m.png");
    write_rgb_png(&ip, &s.image).unwrap();
    write_gray_png(&mp, &s.mask).unwrap();
    assert_eq!(read_rgb_png(&ip).unwrap(), s.image);
    assert_eq!(read_gray_png(&mp).unwrap(), s.mask);
    let loaded = data::load_sample("x", &ip, &mp).unwrap();
    assert_eq!(loaded.image, s.image);

    let corrupt = d.path().join("corrupt.png");
    fs::write(&corrupt, b"not a png at all").unwrap();
    let err = read_rgb_png(&corrupt).unwrap_err().to_string();
    assert!(err.contains("corrupt.png"), "{err}");
    let missing = d.path().join("missing.png");
    assert!(read_rgb_png(&missing).unwrap_err().to_string().contains("missing.png"));

    let small = d.path().join("small.png");
    write_gray_png(&small, &mask(32, 32, |_, _| 0)).unwrap();
    assert!(matches!(
        data::load_sample("x", &ip, &small),
        Err(DataError::DimensionMismatch { .. })
    ));
    let gray = d.path().join("gray.png");
    write_gray_png(&gray, &mask(96, 64, |_, _| 9)).unwrap();
    assert!(data::load_sample("x", &ip, &gray).is_err());
}

fn dummy_manifest(n: usize) -> Manifest {
    let text: String = (0..n).map(|i| format!("f{i}\ti{i}.png\tm{i}.png\ttrain\n")).collect();
    Manifest::parse(&format!("mean_r = 0\nmean_g = 0\nmean_b = 0\n{text}"), Path::new(".")).unwrap()
}

#[test]
fn split_examples() {
    let m = dummy_manifest(10);
    let s = split_dataset(&m, [0.8, 0.1, 0.1], 3).unwrap();
    assert_eq!(
        [s.count(Split::Train), s.count(Split::Validation), s.count(Split::Test)],
        [8, 1, 1]
    );
    let all = split_dataset(&m, [1.0, 0.0, 0.0], 3).unwrap();
    assert_eq!(all.count(Split::Train), 10);
    assert_eq!(split_dataset(&m, [0.8, 0.1, 0.1], 3).unwrap(), s);
    let labels = |m: &Manifest| m.entries.iter().map(|e| e.split).collect::<Vec<_>>();
    assert_ne!(labels(&s), labels(&split_dataset(&m, [0.8, 0.1, 0.1], 4).unwrap()));
    // Order and identity of entries are preserved; only the split labels move.
    let mut seen: Vec<String> = s.entries.iter().map(|e| e.id.clone()).collect();
    seen.sort();
    let mut want: Vec<String> = m.entries.iter().map(|e| e.id.clone()).collect();
    want.sort();
    assert_eq!(seen, want);
    assert!(matches!(split_dataset(&dummy_manifest(2), [0.8, 0.1, 0.1], 0), Err(DataError::Split(_))));
    assert!(split_dataset(&m, [0.5, 0.2, 0.2], 0).is_err());
    assert!(split_dataset(&m, [1.2, -0.1, -0.1], 0).is_err());
}

#[test]
fn means_cover_the_training_split() {
    let d = tempfile::tempdir().unwrap();
    let m = generate_synthetic(5, 8, (32, 32), d.path()).unwrap();
    let mut s = split_dataset(&m, [0.6, 0.2, 0.2], 1).unwrap();
    s.recompute_means().unwrap();
    let train: Vec<RgbImage> = s.split(Split::Train).map(|e| s.load_sample(e).unwrap().image).collect();
    assert_eq!(train.len(), 3);
    let mut sums = [0.0; 3];
    for img in &train {
        for px in img.data.chunks(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64 / 255.0;
            }
        }
    }
    for (m, sum) in s.means.iter().zip(sums) {
        assert!((m - sum / (3.0 * 1024.0)).abs() < 1e-12);
    }
}
