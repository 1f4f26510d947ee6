use fhseg::data::{
    augment, decode_sample, encode_sample, flip_horizontal, flip_vertical, generate_patches,
    generate_sample, load_split, make_splits, patchify, read_manifest, unpatchify, write_manifest,
    write_sample, GeneratorSpec, ManifestEntry, Ring, Sample, Split, Variant, ARTERY,
    ARTERY_WALL, BACKGROUND, HYALINE, INTIMA, LUMEN, MEDIA, NUM_CLASSES,
};
use fhseg::Error;

fn spec() -> GeneratorSpec {
    GeneratorSpec::default()
}

#[test]
fn generation_is_deterministic() {
    let a = generate_sample(&spec(), 42).unwrap();
    let b = generate_sample(&spec(), 42).unwrap();
    assert!(a.image.bit_eq(&b.image));
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.meta, b.meta);
    let c = generate_sample(&spec(), 43).unwrap();
    assert_ne!(a.mask, c.mask);
}

#[test]
fn labels_follow_variant() {
    let allowed = |v: Variant| -> Vec<u8> {
        match v {
            Variant::Components => vec![BACKGROUND, LUMEN, INTIMA, MEDIA, HYALINE],
            Variant::Wall => vec![BACKGROUND, LUMEN, ARTERY_WALL, HYALINE],
            Variant::Artery => vec![BACKGROUND, ARTERY, HYALINE],
        }
    };
    let mut seen = [false; 3];
    for seed in 0..60 {
        let s = generate_sample(&spec(), seed).unwrap();
        let v = s.meta.variant.unwrap();
        seen[Variant::ALL.iter().position(|&x| x == v).unwrap()] = true;
        let ok = allowed(v);
        assert!(s.mask.iter().all(|m| ok.contains(m)), "seed {seed} {v:?}");
        assert!(s.mask.iter().all(|&m| (m as usize) < NUM_CLASSES));
        assert!(s.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
    assert!(seen.iter().all(|&b| b));
}

#[test]
fn rings_are_nested() {
    for seed in 0..40 {
        let s = generate_sample(&spec(), seed).unwrap();
        for v in &s.meta.vessels {
            assert!(0.0 < v.radii[0] && v.radii[0] < v.radii[1] && v.radii[1] < v.radii[2]);
            // walking outward along any ray never re-enters an inner ring
            for k in 0..32 {
                let t = k as f64 / 32.0 * std::f64::consts::TAU;
                let mut last = 0;
                for step in 0..200 {
                    let r = step as f64 * 0.15;
                    let ring = v.ring_at(v.center.0 + r * t.sin(), v.center.1 + r * t.cos());
                    let order = match ring {
                        Ring::Lumen => 0,
                        Ring::Intima => 1,
                        Ring::Media => 2,
                        Ring::Outside => 3,
                    };
                    assert!(order >= last);
                    last = order;
                }
            }
        }
    }
}

#[test]
fn lumen_is_enclosed_by_wall() {
    for seed in 0..40 {
        let s = generate_sample(&spec(), seed).unwrap();
        if s.meta.variant != Some(Variant::Components) {
            continue;
        }
        let n = s.width();
        for y in 0..n {
            for x in 0..n {
                if s.mask[y * n + x] != LUMEN {
                    continue;
                }
                for (dy, dx) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    assert!(yy >= 0 && xx >= 0 && (yy as usize) < n && (xx as usize) < n);
                    let m = s.mask[yy as usize * n + xx as usize];
                    assert!([LUMEN, INTIMA, HYALINE].contains(&m), "seed {seed}: lumen touches {m}");
                }
            }
        }
        // one connected lumen region per vessel
        let mut seen = vec![false; n * n];
        let mut regions = 0;
        for start in 0..n * n {
            if s.mask[start] != LUMEN || seen[start] {
                continue;
            }
            regions += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / n, p % n);
                let mut push = |q: usize| {
                    if s.mask[q] == LUMEN && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if y > 0 { push(p - n); }
                if y + 1 < n { push(p + n); }
                if x > 0 { push(p - 1); }
                if x + 1 < n { push(p + 1); }
            }
        }
        assert_eq!(regions, s.meta.vessels.len(), "seed {seed}");
    }
}

#[test]
fn hyaline_rate_concentrates() {
    let hits = (0..1000)
        .filter(|&seed| generate_sample(&spec(), seed).unwrap().meta.hyaline)
        .count();
    let frac = hits as f64 / 1000.0;
    assert!((0.20..=0.30).contains(&frac), "{frac}");
}

#[test]
fn tiny_canvas_is_config_error() {
    let s = GeneratorSpec { canvas: 16, patch: 16, ..spec() };
    assert!(matches!(generate_sample(&s, 0), Err(Error::Config(_))));
}

#[test]
fn double_flip_is_identity() {
    let s = generate_sample(&spec(), 5).unwrap();
    let h2 = flip_horizontal(&flip_horizontal(&s));
    let v2 = flip_vertical(&flip_vertical(&s));
    assert_eq!(h2, s);
    assert_eq!(v2, s);
}

#[test]
fn augmentation_keeps_alignment_histogram_and_range() {
    // The red channel encodes each pixel's original index. Color jitter is a
    // monotone affine map that stays inside [0,1] here, so ranking red values
    // recovers where every pixel came from.
    let n = 8;
    let mut s = patchify(&generate_sample(&spec(), 1).unwrap(), n).unwrap().remove(0);
    for p in 0..n * n {
        s.mask[p] = (p * 3 % NUM_CLASSES) as u8;
        s.image.data_mut()[p] = 0.2 + 0.6 * p as f64 / (n * n) as f64;
    }
    for seed in 0..20 {
        let a = augment(&s, seed);
        assert_eq!(a.class_histogram(), s.class_histogram());
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let red = &a.image.data()[..n * n];
        let mut order: Vec<usize> = (0..n * n).collect();
        order.sort_by(|&i, &j| red[i].total_cmp(&red[j]));
        for (orig, &now) in order.iter().enumerate() {
            assert_eq!(a.mask[now], s.mask[orig], "seed {seed}");
            let (oy, ox, ny, nx) = (orig / n, orig % n, now / n, now % n);
            assert!(ny == oy || ny == n - 1 - oy);
            assert!(nx == ox || nx == n - 1 - ox);
        }
    }
}

#[test]
fn patchify_partitions() {
    let s = generate_sample(&spec(), 11).unwrap();
    let ps = patchify(&s, 32).unwrap();
    assert_eq!(ps.len(), 4);
    let back = unpatchify(&ps, 2, 2).unwrap();
    assert!(back.image.bit_eq(&s.image));
    assert_eq!(back.mask, s.mask);
    let mut sum = [0u64; NUM_CLASSES];
    for p in &ps {
        for (a, b) in sum.iter_mut().zip(p.class_histogram()) {
            *a += b;
        }
    }
    assert_eq!(sum, s.class_histogram());
    assert!(matches!(patchify(&s, 24), Err(Error::Dimension { .. })));
}

#[test]
fn splits_partition_indices() {
    let a = make_splits(100, 3).unwrap();
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (60, 20, 20));
    let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(a, make_splits(100, 3).unwrap());
    assert_ne!(a, make_splits(100, 4).unwrap());
}

#[test]
fn patches_come_from_consecutive_canvases() {
    let ps = generate_patches(&spec(), 6, 2).unwrap();
    assert_eq!(ps.len(), 6);
    assert!(ps.iter().all(|p| p.height() == 32));
    assert_eq!(ps[0].meta.seed, ps[3].meta.seed);
    assert_ne!(ps[3].meta.seed, ps[4].meta.seed);
}

#[test]
fn sample_file_round_trip_and_corruption() {
    let s: Sample = patchify(&generate_sample(&spec(), 3).unwrap(), 32).unwrap().remove(1);
    let bytes = encode_sample(&s);
    let back = decode_sample(&bytes, "mem").unwrap();
    assert!(back.image.bit_eq(&s.image));
    assert_eq!(back.mask, s.mask);
    assert_eq!(encode_sample(&back), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_sample(&bad, "mem"), Err(Error::Data(_))));
    let mut newer = bytes.clone();
    newer[4] = 2;
    assert!(matches!(decode_sample(&newer, "mem"), Err(Error::Data(_))));
    assert!(matches!(decode_sample(&bytes[..bytes.len() - 1], "mem"), Err(Error::Data(_))));
    let mut bad_class = bytes.clone();
    *bad_class.last_mut().unwrap() = 9;
    assert!(matches!(decode_sample(&bad_class, "mem"), Err(Error::Data(_))));
}

#[test]
fn manifest_round_trip_and_split_loading() {
    let dir = tempfile::tempdir().unwrap();
    let ps = generate_patches(&spec(), 10, 1).unwrap();
    let splits = make_splits(10, 1).unwrap().assignment();
    let mut entries = Vec::new();
    for (i, p) in ps.iter().enumerate() {
        let file = format!("s{i}.bin");
        write_sample(&dir.path().join(&file), p).unwrap();
        entries.push(ManifestEntry { file, seed: p.meta.seed, split: splits[i] });
    }
    let m = dir.path().join("manifest.tsv");
    write_manifest(&m, &entries).unwrap();
    assert_eq!(read_manifest(&m).unwrap(), entries);
    let test = load_split(&m, Split::Test).unwrap();
    assert_eq!(test.len(), 2);
    assert!(matches!(read_manifest(&dir.path().join("nope")), Err(Error::Io { .. })));
}
