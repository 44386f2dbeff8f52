use std::io::Write;

use proptest::prelude::*;
use vidode::data::{
    decode_mmv1, encode_mmv1, generate, generate_with_tracks, load_idx, render_sequence,
    synth_blob, DatasetSpec, SpriteSource, SpriteState,
};

/// Moves in many sub-steps, reflecting whenever a wall is crossed.
fn brute_force(mut p: f64, mut v: f64, max: f64, frames: usize) -> Vec<f64> {
    const SUB: usize = 4096;
    let mut out = vec![p];
    for _ in 1..frames {
        for _ in 0..SUB {
            p += v / SUB as f64;
            if p > max {
                p = 2.0 * max - p;
                v = -v;
            } else if p < 0.0 {
                p = -p;
                v = -v;
            }
        }
        out.push(p);
    }
    out
}

fn spec(seed: u64, sprites: usize, size: usize) -> DatasetSpec {
    DatasetSpec {
        sequences: 4,
        frames: 30,
        sprites,
        seed,
        source: SpriteSource::Blob { size },
        ..DatasetSpec::default()
    }
}

#[test]
fn reflection_matches_brute_force_walkthrough() {
    let mut s = SpriteState {
        x: 20.0,
        y: 0.0,
        vx: 3.0,
        vy: 0.0,
        bitmap: synth_blob(8).unwrap(),
    };
    let oracle = brute_force(20.0, 3.0, 24.0, 6);
    for want in oracle {
        assert!((s.x - want).abs() < 1e-9);
        s.advance(32, 32);
    }
}

#[test]
fn overlapping_sprites_composite_by_max() {
    let blob = synth_blob(8).unwrap();
    let mk = |x: f64| SpriteState {
        x,
        y: 3.25,
        vx: 0.0,
        vy: 0.0,
        bitmap: blob.clone(),
    };
    let (both, _) = render_sequence(&mut [mk(4.5), mk(7.0)], 1, 16, 20).unwrap();
    let (a, _) = render_sequence(&mut [mk(4.5)], 1, 16, 20).unwrap();
    let (b, _) = render_sequence(&mut [mk(7.0)], 1, 16, 20).unwrap();
    for ((&m, &x), &y) in both.frame(0).iter().zip(a.frame(0)).zip(b.frame(0)) {
        assert_eq!(m, x.max(y));
    }
}

#[test]
fn idx_digits_feed_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("digits.idx");
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(&[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28])
        .unwrap();
    let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| ((i * 37) % 256) as u8).collect();
    f.write_all(&pixels).unwrap();
    drop(f);
    assert_eq!(load_idx(&path).unwrap().shape(), &[2, 28, 28]);
    let s = DatasetSpec {
        sequences: 3,
        frames: 5,
        sprites: 2,
        source: SpriteSource::Idx {
            path: path.clone(),
            size: 16,
        },
        ..DatasetSpec::default()
    };
    let data = generate(&s).unwrap();
    assert_eq!(data.len(), 3);
    assert!(data
        .iter()
        .all(|v| v.frames().data().iter().any(|&p| p > 0.0)));
    let missing = DatasetSpec {
        source: SpriteSource::Idx {
            path: dir.path().join("nope"),
            size: 16,
        },
        ..s
    };
    assert_eq!(generate(&missing).unwrap_err().code(), "io");
}

#[test]
fn invalid_specs_rejected() {
    assert!(generate(&spec(0, 3, 8)).is_err());
    assert!(generate(&spec(0, 1, 40)).is_err());
    assert!(generate(&DatasetSpec {
        speed_min: 0.0,
        ..spec(0, 1, 8)
    })
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sprites_stay_inside_and_keep_speed(seed in 0u64..10_000, sprites in 1usize..3, size in 3usize..16) {
        let s = spec(seed, sprites, size);
        for (video, tracks) in generate_with_tracks(&s).unwrap() {
            prop_assert!(video.frames().data().iter().all(|p| (0.0..=1.0).contains(p)));
            let max = (32 - size) as f64;
            for frame in &tracks {
                for &[x, y, _, _] in frame {
                    prop_assert!((0.0..=max).contains(&x) && (0.0..=max).contains(&y));
                }
            }
            for k in 0..sprites {
                let speed = |t: usize| tracks[t][k][2].hypot(tracks[t][k][3]);
                for t in 1..tracks.len() {
                    prop_assert!((speed(t) - speed(0)).abs() < 1e-12);
                }
                prop_assert!((1.0..=3.0).contains(&speed(0)));
            }
        }
    }

    #[test]
    fn reflection_agrees_with_substepping(x in 0.0f64..24.0, v in -3.0f64..3.0) {
        let mut s = SpriteState { x, y: 0.0, vx: v, vy: 0.0, bitmap: synth_blob(8).unwrap() };
        for want in brute_force(x, v, 24.0, 25) {
            prop_assert!((s.x - want).abs() < 1e-6);
            s.advance(32, 32);
        }
    }

    #[test]
    fn generation_is_reproducible(seed in 0u64..10_000) {
        let a = encode_mmv1(&generate(&spec(seed, 2, 8)).unwrap()).unwrap();
        let b = encode_mmv1(&generate(&spec(seed, 2, 8)).unwrap()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(decode_mmv1(&a).unwrap().len(), 4);
    }
}
