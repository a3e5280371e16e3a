mod common;

use vnetseg::data::{
    generate_phantom, rotate_patch, sample_training_patches, Axis, PatchKind, PhantomConfig,
    Rotation, SamplerConfig, Volume,
};

fn phantom(seed: u64) -> (Volume, Volume) {
    let p = generate_phantom(&PhantomConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    (p.image, p.truth)
}

#[test]
fn positive_fraction_over_ten_thousand_draws() {
    let (image, truth) = phantom(3);
    let config = SamplerConfig {
        count: 40,
        ..Default::default()
    };
    let mut positive = 0usize;
    let mut total = 0usize;
    let mut violations = 0usize;
    for call in 0..250u64 {
        for patch in sample_training_patches(&image, &truth, &config, 1000 + call).unwrap() {
            total += 1;
            let hits = patch.truth.count_positive();
            match patch.spec.kind {
                PatchKind::PositiveCentered => {
                    positive += 1;
                    violations += usize::from(hits == 0);
                }
                PatchKind::AllNegative => violations += usize::from(hits != 0),
                PatchKind::Tiling => unreachable!(),
            }
        }
    }
    assert_eq!(total, 10_000);
    let frac = positive as f64 / total as f64;
    assert!((frac - 0.7).abs() <= 0.015, "positive fraction {frac}");
    assert_eq!(violations, 0);
}

#[test]
fn patches_are_exact_copies_of_the_volume() {
    let (image, truth) = phantom(4);
    let patches = sample_training_patches(&image, &truth, &SamplerConfig::default(), 9).unwrap();
    for patch in patches {
        let o = patch.spec.origin;
        let p = patch.spec.size;
        for z in 0..p {
            for y in 0..p {
                for x in 0..p {
                    let src = image.index(o[0] + x, o[1] + y, o[2] + z);
                    let dst = patch.image.index(x, y, z);
                    assert_eq!(patch.image.value(dst), image.value(src));
                    assert_eq!(patch.truth.value(dst), truth.value(src));
                }
            }
        }
    }
}

#[test]
fn same_seed_same_patches() {
    let (image, truth) = phantom(5);
    let config = SamplerConfig::default();
    let a = sample_training_patches(&image, &truth, &config, 77).unwrap();
    let b = sample_training_patches(&image, &truth, &config, 77).unwrap();
    assert_eq!(a, b);
    let c = sample_training_patches(&image, &truth, &config, 78).unwrap();
    assert_ne!(
        a.iter().map(|p| p.spec).collect::<Vec<_>>(),
        c.iter().map(|p| p.spec).collect::<Vec<_>>()
    );
}

#[test]
fn patch_i_does_not_depend_on_count() {
    let (image, truth) = phantom(6);
    let short = SamplerConfig {
        count: 3,
        ..Default::default()
    };
    let long = SamplerConfig {
        count: 9,
        ..Default::default()
    };
    let a = sample_training_patches(&image, &truth, &short, 5).unwrap();
    let b = sample_training_patches(&image, &truth, &long, 5).unwrap();
    assert_eq!(a[..], b[..3]);
}

#[test]
fn empty_truth_falls_back_to_negative() {
    let (image, truth) = phantom(7);
    let empty = Volume::empty_mask(truth.dims(), truth.spacing()).unwrap();
    let config = SamplerConfig {
        count: 20,
        positive_ratio: 1.0,
        ..Default::default()
    };
    let patches = sample_training_patches(&image, &empty, &config, 1).unwrap();
    assert!(patches
        .iter()
        .all(|p| p.spec.kind == PatchKind::AllNegative));
}

#[test]
fn exhausted_retries_is_an_error() {
    let (image, _) = phantom(8);
    let full = Volume::mask(image.dims(), image.spacing(), vec![1; image.len()]).unwrap();
    let config = SamplerConfig {
        count: 5,
        positive_ratio: 0.0,
        max_retries: 10,
        ..Default::default()
    };
    let err = sample_training_patches(&image, &full, &config, 1).unwrap_err();
    assert!(err.to_string().contains("10 draws"), "{err}");
}

#[test]
fn rotations_keep_labels_and_compose() {
    let (image, truth) = phantom(9);
    let patch = &sample_training_patches(&image, &truth, &SamplerConfig::default(), 3).unwrap()[0];
    for axis in [Axis::X, Axis::Y, Axis::Z] {
        let mut img = patch.image.clone();
        let mut gt = patch.truth.clone();
        for _ in 0..4 {
            (img, gt) = rotate_patch(&img, &gt, Rotation::R90, axis).unwrap();
            assert_eq!(gt.count_positive(), patch.truth.count_positive());
        }
        assert_eq!(img, patch.image);
        assert_eq!(gt, patch.truth);
        let (a, _) = rotate_patch(&patch.image, &patch.truth, Rotation::R180, axis).unwrap();
        let (b, _) = rotate_patch(&patch.image, &patch.truth, Rotation::R90, axis).unwrap();
        let (b, _) = rotate_patch(&b, &patch.truth, Rotation::R90, axis).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn quarter_turn_about_x_moves_y_into_z() {
    let n = 4;
    let mut vals = vec![0u8; n * n * n];
    vals[1 + n * (0 + n * 0)] = 1;
    let truth = Volume::mask([n; 3], [1.0; 3], vals).unwrap();
    let image = Volume::gray([n; 3], [1.0; 3], vec![0.0; n * n * n]).unwrap();
    let (_, r) = rotate_patch(&image, &truth, Rotation::R90, Axis::X).unwrap();
    // (y, z) = (0, 0) goes to (n-1, 0)
    assert_eq!(r.value(r.index(1, n - 1, 0)), 1.0);
    assert_eq!(r.count_positive(), 1);
}
