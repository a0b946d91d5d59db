mod common;

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use sscd_core::dataio::netpbm::{decode_labelmap, decode_mask, encode_labelmap, encode_mask, parse_header, RgbImage};
use sscd_core::dataio::{
    crop_offsets, extract_patches, generate_toy_scene, generate_toy_scene_pair, generate_toy_segmentation, kfold_split, read_image,
    read_labelmap, read_pairs, write_image, write_labelmap, write_pair, Palette, PanoramaPair, PatchConfig, PatchSource, Primitive,
    Rotation, Shape, ToyScene, ToySceneConfig,
};
use sscd_core::engine::Tensor;
use sscd_core::{ChangeMask, Error, LabelMap, UNLABELED};

fn p() -> &'static Path {
    Path::new("fixture")
}

#[test]
fn known_byte_fixture() {
    let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&[0, 255, 51, 102, 127, 128, 255, 0, 204, 1, 2, 3]);
    let img = RgbImage::decode(&bytes, p()).unwrap();
    let t = img.to_tensor();
    assert_eq!(t.shape(), &[3, 2, 2]);
    let f = |v: u8| v as f32 / 127.5 - 1.0;
    // Planar red, green, blue.
    let expected = [f(0), f(102), f(255), f(1), f(255), f(127), f(0), f(2), f(51), f(128), f(204), f(3)];
    assert_eq!(t.data(), &expected);
    assert_eq!(t.data()[0], -1.0);
    assert_eq!(t.data()[2], 1.0);
    assert_eq!(RgbImage::from_tensor(&t).unwrap(), img);
    assert_eq!(RgbImage::decode(&img.encode(), p()).unwrap(), img);
}

#[test]
fn image_round_trip_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ppm");
    let mut rng = common::rng(1);
    let t = Tensor::from_fn(&[3, 7, 9], |_| rng.random_range(-1.0f32..=1.0));
    write_image(&t, &path).unwrap();
    let back = read_image(&path).unwrap();
    assert!(t.max_abs_diff(&back) <= 1.0 / 127.5);

    let black = RgbImage {
        width: 4,
        height: 3,
        data: vec![0; 36],
    };
    assert!(black.to_tensor().data().iter().all(|&v| v == -1.0));
}

#[test]
fn malformed_headers_report_offsets() {
    let err = |bytes: &[u8]| match RgbImage::decode(bytes, p()) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected format error, got {other:?}"),
    };
    assert_eq!(err(b"P5\n1 1\n255\n\0"), 0);
    assert_eq!(err(b"P6\n2 x\n255\n"), 5);
    assert_eq!(err(b"P6\n1 1\n65535\n"), 12);
    // Truncated raster: offset is the end of the file.
    assert_eq!(err(b"P6\n1 1\n255\n\x01\x02"), 13);
    // Trailing bytes start right after the raster.
    assert_eq!(err(b"P6\n1 1\n255\n\x01\x02\x03\x04"), 14);
    assert_eq!(err(b"P6\n1 0\n255\n"), 5);
    let h = parse_header(b"P5 3 2 255 abcdef", b"P5", p()).unwrap();
    assert_eq!((h.width, h.height, h.data_offset), (3, 2, 11));
}

#[test]
fn labelmap_round_trip_and_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.pgm");
    let mut rng = common::rng(2);
    let l = LabelMap::new(11, 5, (0..55).map(|_| rng.random_range(0..=10)).collect()).unwrap();
    write_labelmap(&l, &path).unwrap();
    assert_eq!(read_labelmap(&path).unwrap(), l);

    let with_void = LabelMap::new(2, 1, vec![3, UNLABELED]).unwrap();
    let back = decode_labelmap(&encode_labelmap(&with_void), p()).unwrap();
    assert_eq!(back.get(0, 1), UNLABELED);
}

#[test]
fn mask_codec() {
    let m = ChangeMask::new(3, 1, vec![0, 1, 1]).unwrap();
    let bytes = encode_mask(&m);
    assert!(bytes.ends_with(&[0, 255, 255]));
    assert_eq!(decode_mask(&bytes, p()).unwrap(), m);
    assert!(decode_mask(b"P5\n2 1\n255\n\x00\x01", p()).is_ok());
    assert!(matches!(decode_mask(b"P5\n2 1\n255\n\x00\x07", p()), Err(Error::Format { offset: 12, .. })));
}

#[test]
fn palette_spot_checks() {
    let pal = Palette::parse("# id r g b\n0 0 0 0\n1 255 0 0\n2 0 255 0  # green\n").unwrap();
    let l = LabelMap::new(2, 2, vec![0, 1, 2, UNLABELED]).unwrap();
    let rgb = pal.colorize(&l).unwrap();
    assert_eq!(&rgb.data[3..6], &[255, 0, 0]);
    assert_eq!(&rgb.data[6..9], &[0, 255, 0]);
    assert_eq!(&rgb.data[9..12], &[0, 0, 0]);
    assert!(pal.colorize(&LabelMap::new(1, 1, vec![3]).unwrap()).is_err());
    assert!(Palette::parse("1 2 3").is_err());
    assert_eq!(Palette::parse(&pal.to_text()).unwrap(), pal);
    let d = Palette::default_for(40);
    let distinct: HashSet<[u8; 3]> = (0..40).map(|c| d.get(c).unwrap()).collect();
    assert_eq!(distinct.len(), 40);
}

fn stripe_pair(id: &str, w: usize, h: usize, seed: u64) -> PanoramaPair {
    let mut rng = common::rng(seed);
    let i1 = Tensor::from_fn(&[3, h, w], |_| rng.random_range(-1.0f32..=1.0));
    let i2 = Tensor::from_fn(&[3, h, w], |_| rng.random_range(-1.0f32..=1.0));
    let mask = ChangeMask::from_fn(w, h, |_, _| rng.random_bool(0.3));
    PanoramaPair::new(id, i1, i2, mask, None).unwrap()
}

#[test]
fn offsets_anchor_endpoints() {
    let o = crop_offsets(1024, 224, 30).unwrap();
    assert_eq!(o.len(), 30);
    assert_eq!((o[0], o[29]), (0, 800));
    assert!(o.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(crop_offsets(100, 100, 1).unwrap(), vec![0]);
    assert!(crop_offsets(100, 101, 3).is_err());
}

#[test]
fn patch_count_and_order() {
    let pair = stripe_pair("a", 300, 240, 3);
    let cfg = PatchConfig::default();
    let patches = extract_patches(&pair, &cfg).unwrap();
    assert_eq!(patches.len(), 120);
    let sources: Vec<PatchSource> = patches.sources().collect();
    let mut sorted = sources.clone();
    sorted.sort();
    assert_eq!(sources, sorted);
    let first = extract_patches(&pair, &cfg).unwrap().next().unwrap();
    assert_eq!(first.i1.shape(), &[3, 256, 256]);
    assert_eq!(first.source, sources[0]);
    for s in &sources[..3] {
        assert_eq!(PatchSource::parse_manifest_line(&s.manifest_line()).unwrap(), *s);
    }
    let tall = stripe_pair("b", 300, 200, 3);
    assert!(extract_patches(&tall, &cfg).is_err());
}

#[test]
fn rotations_compose_to_identity() {
    let mut rng = common::rng(4);
    let n = 6;
    let v: Vec<u16> = (0..2 * n * n).map(|_| rng.random()).collect();
    let mut cur = v.clone();
    for _ in 0..4 {
        cur = Rotation::R90.apply(&cur, n);
    }
    assert_eq!(cur, v);
    for a in Rotation::ALL {
        for b in Rotation::ALL {
            assert_eq!(b.apply(&a.apply(&v, n), n), a.then(b).apply(&v, n));
        }
        // forward is the inverse of the gather.
        let out = a.apply(&v[..n * n], n);
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = a.forward(n, y, x);
                assert_eq!(out[fy * n + fx], v[y * n + x]);
            }
        }
    }
    assert!(Rotation::from_degrees(45).is_err());
    assert_eq!("270".parse::<Rotation>().unwrap(), Rotation::R270);
}

#[test]
fn changed_pixels_follow_geometry() {
    // crop == out makes the resize an exact integer crop.
    let pair = stripe_pair("g", 50, 20, 5);
    let cfg = PatchConfig {
        crop: 16,
        out: 16,
        crops_per_image: 4,
        rotations: Rotation::ALL.to_vec(),
    };
    let top = 2;
    for patch in extract_patches(&pair, &cfg).unwrap() {
        let (off, rot) = (patch.source.offset, patch.source.rotation);
        for y in 0..16 {
            for x in 0..16 {
                let (ry, rx) = rot.forward(16, y, x);
                assert_eq!(patch.mask.get(ry, rx), pair.mask.get(top + y, off + x));
                for c in 0..3 {
                    let a = patch.i1.data()[(c * 16 + ry) * 16 + rx];
                    let b = pair.i1.data()[(c * 20 + top + y) * 50 + off + x];
                    assert_eq!(a, b);
                }
            }
        }
    }
}

#[test]
fn resize_preserves_constants_and_nearest_masks() {
    let mut pair = stripe_pair("c", 40, 40, 6);
    pair.i1 = Tensor::full(&[3, 40, 40], 0.25);
    let cfg = PatchConfig {
        crop: 32,
        out: 48,
        crops_per_image: 2,
        rotations: vec![Rotation::R0],
    };
    for patch in extract_patches(&pair, &cfg).unwrap() {
        assert!(patch.i1.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!(patch.mask.data().iter().all(|&v| v <= 1));
    }
}

fn check_toy_invariants(scene: &ToyScene) {
    let pair = scene.render().unwrap();
    let (w, h) = (scene.width, scene.height);
    for y in 0..h {
        for x in 0..w {
            let m = pair.mask.get(y, x);
            let (c0, c1) = (pair.change0.get(y, x), pair.change1.get(y, x));
            assert_eq!(m, c0 != 0 || c1 != 0);
            assert_eq!(m, pair.seg0.get(y, x) != pair.seg1.get(y, x));
            if m {
                assert_eq!((c0, c1), (pair.seg0.get(y, x), pair.seg1.get(y, x)));
                let inside_altered = scene
                    .primitives
                    .iter()
                    .any(|p| p.before != p.after && p.shape.contains(y as isize, x as isize));
                assert!(inside_altered, "change at ({y},{x}) outside every altered primitive");
            } else {
                assert_eq!((c0, c1), (0, 0));
            }
        }
    }
    assert!(pair.i1.data().iter().chain(pair.i2.data()).all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn toy_scenes_are_consistent() {
    let cfg = ToySceneConfig::new(48, 5);
    let mut changed = 0;
    for seed in 0..100 {
        let scene = generate_toy_scene(&cfg, seed).unwrap();
        check_toy_invariants(&scene);
        changed += usize::from(scene.render().unwrap().mask.count_ones() > 0);
    }
    assert!(changed > 90);
    let a = generate_toy_scene_pair(7, 32, 4).unwrap();
    assert_eq!(a, generate_toy_scene_pair(7, 32, 4).unwrap());
    assert!(generate_toy_scene_pair(7, 16, 4).is_err());
}

#[test]
fn zero_alterations_give_empty_mask() {
    let cfg = ToySceneConfig {
        alterations: (0, 0),
        ..ToySceneConfig::new(40, 4)
    };
    for seed in 0..10 {
        let pair = generate_toy_scene(&cfg, seed).unwrap().render().unwrap();
        assert_eq!(pair.mask.count_ones(), 0);
        assert!(pair.change0.data().iter().chain(pair.change1.data()).all(|&c| c == 0));
    }
}

#[test]
fn scripted_disc_appears() {
    let disc = Shape::Disc { cy: 20.0, cx: 30.0, r: 6.0 };
    let scene = ToyScene {
        width: 48,
        height: 40,
        num_classes: 4,
        seed: 9,
        shift: 0,
        primitives: vec![
            Primitive::fixed(Shape::Rect { top: 2.0, left: 2.0, height: 10.0, width: 12.0 }, 1),
            Primitive { shape: disc, before: None, after: Some(3) },
        ],
    };
    let pair = scene.render().unwrap();
    let silhouette = ChangeMask::from_fn(48, 40, |y, x| disc.contains(y as isize, x as isize));
    assert!(silhouette.count_ones() > 100);
    assert_eq!(pair.mask, silhouette);
    for y in 0..40 {
        for x in 0..48 {
            let on = silhouette.get(y, x);
            assert_eq!(pair.change1.get(y, x), if on { 3 } else { 0 });
            assert_eq!(pair.change0.get(y, x), 0);
        }
    }
    let mut bad = scene.clone();
    bad.primitives[0].before = Some(4);
    assert!(bad.render().is_err());
}

#[test]
fn shifted_scene_moves_second_image_only() {
    let base = ToySceneConfig::new(48, 4);
    let shifted = ToySceneConfig { shift: 4, ..base.clone() };
    let a = generate_toy_scene(&base, 3).unwrap().render().unwrap();
    let b = generate_toy_scene(&shifted, 3).unwrap().render().unwrap();
    assert_eq!(a.i1, b.i1);
    assert_eq!(a.mask, b.mask);
    assert_ne!(a.i2, b.i2);
}

#[test]
fn toy_segmentation_has_two_classes() {
    for seed in 0..30 {
        let s = generate_toy_segmentation(seed, 32, 4).unwrap();
        assert!(s.present_classes().len() >= 2);
    }
    assert!(generate_toy_segmentation(0, 32, 2).is_err());
}

#[test]
fn kfold_properties() {
    let folds = kfold_split(100, 5, 1).unwrap();
    assert_eq!(folds.len(), 5);
    let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
    assert!(folds.iter().all(|f| f.test.len() == 20 && f.train.len() == 80));
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    for f in &folds {
        assert!(f.train.iter().all(|i| !f.test.contains(i)));
    }
    assert_eq!(folds, kfold_split(100, 5, 1).unwrap());
    assert_ne!(folds, kfold_split(100, 5, 2).unwrap());
    let uneven = kfold_split(7, 3, 0).unwrap();
    assert_eq!(uneven.iter().map(|f| f.test.len()).collect::<Vec<_>>(), vec![3, 2, 2]);
    assert!(kfold_split(5, 1, 0).is_err());
    assert!(kfold_split(3, 4, 0).is_err());
}

#[test]
fn pair_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let toy = generate_toy_scene_pair(11, 32, 4).unwrap().into_pair("p01");
    write_pair(dir.path(), &toy).unwrap();
    write_pair(dir.path(), &stripe_pair("p00", 8, 6, 1)).unwrap();
    let pairs = read_pairs(dir.path()).unwrap();
    assert_eq!(pairs.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["p00", "p01"]);
    assert!(pairs[0].labels.is_none());
    assert_eq!(pairs[1].mask, toy.mask);
    assert_eq!(pairs[1].labels, toy.labels);
    assert!(pairs[1].i1.max_abs_diff(&toy.i1) <= 1.0 / 127.5);
}
