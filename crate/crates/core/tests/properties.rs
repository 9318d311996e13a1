use acal_core::data::{
    gen_glyph_domain, load_idx, render_glyph, strip_labels, subsample_per_class, write_idx, AffineJitter,
    DomainDataset, GlyphStyle, Split,
};
use acal_core::eval::accuracy;
use acal_core::nets::{build_classifier, build_generator, InitSpec, Network};
use acal_core::objectives::{pseudo_label, recon_cycle_loss, relaxed_cycle_loss};
use acal_core::{Graph, Tensor};
use proptest::prelude::*;

fn style() -> impl Strategy<Value = GlyphStyle> {
    (
        any::<bool>(),
        0u8..=1,
        0.0f64..1.0,
        (0.0f64..4.0, 0.0f64..45.0, 0.0f64..0.4),
        -1.0f64..=1.0,
    )
        .prop_map(|(invert, stroke_dilate, noise_sigma, (s, r, k), background_level)| GlyphStyle {
            invert,
            stroke_dilate,
            noise_sigma,
            affine_jitter: AffineJitter {
                max_shift: s,
                max_rotation_deg: r,
                max_scale: k,
            },
            background_level,
        })
}

/// `n` random 1×16×16 images with labels in `0..classes`.
fn dataset(n: usize, classes: usize, seed: u64) -> DomainDataset {
    let mut state = seed | 1;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let pixels = (0..n * 256).map(|_| (next() % 256) as f64 / 127.5 - 1.0).collect();
    let labels = (0..n).map(|i| Some((i + next() as usize) % classes)).collect();
    DomainDataset::new("rand", [1, 16, 16], pixels, labels, classes, Split::Train).unwrap()
}

fn set_final(net: &mut Network, f: impl Fn(usize, usize, f64) -> f64, g: impl Fn(usize, f64) -> f64) {
    let w = net.param("fc2.weight").unwrap().clone();
    let [rows, cols] = [w.shape()[0], w.shape()[1]];
    let data = (0..rows * cols).map(|i| f(i / cols, i % cols, w.data()[i])).collect();
    net.set_param("fc2.weight", Tensor::new(&[rows, cols], data).unwrap()).unwrap();
    let b = net.param("fc2.bias").unwrap().clone();
    let data = (0..cols).map(|j| g(j, b.data()[j])).collect();
    net.set_param("fc2.bias", Tensor::new(&[cols], data).unwrap()).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn glyph_pixels_stay_in_range(s in style(), digit in 0usize..10, seed in any::<u64>()) {
        let px = render_glyph(digit, &s, seed);
        prop_assert_eq!(px.len(), 256);
        prop_assert!(px.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn subsample_is_class_balanced(n in 1usize..5, seed in any::<u64>()) {
        let ds = gen_glyph_domain(&GlyphStyle::identity(), 5, 3, Split::Train).unwrap();
        let sub = subsample_per_class(&ds, n, seed).unwrap();
        prop_assert_eq!(sub.class_histogram(), vec![n; 10]);
        prop_assert!(subsample_per_class(&ds, 6, seed).is_err());
    }

    #[test]
    fn strip_labels_keeps_pixels(fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = dataset(40, 4, seed);
        let stripped = strip_labels(&ds, fraction, seed).unwrap();
        prop_assert_eq!(stripped.pixels().len(), ds.pixels().len());
        prop_assert!(stripped.pixels().iter().zip(ds.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()));
        for (a, b) in stripped.labels().iter().zip(ds.labels()) {
            prop_assert!(a.is_none() || a == b);
        }
        for (class, &size) in ds.class_histogram().iter().enumerate() {
            let kept = stripped.labels().iter().filter(|l| **l == Some(class)).count();
            prop_assert_eq!(kept, (fraction * size as f64).round() as usize);
        }
    }

    #[test]
    fn accuracy_is_invariant_under_relabeling(seed in any::<u64>(), shift in 1usize..10) {
        let ds = dataset(30, 10, seed);
        let net = build_classifier([1, 16, 16], 10, InitSpec::new(seed)).unwrap();
        // Class c becomes (c + shift) mod 10 in both the labels and the
        // classifier's output columns.
        let relabeled = ds.map_labels(|c| (c + shift) % 10);
        let mut moved = net.clone();
        let w = net.param("fc2.weight").unwrap().clone();
        let b = net.param("fc2.bias").unwrap().clone();
        set_final(
            &mut moved,
            |r, c, _| w.data()[r * 10 + (c + 10 - shift) % 10],
            |c, _| b.data()[(c + 10 - shift) % 10],
        );
        prop_assert_eq!(accuracy(&net, &ds).unwrap(), accuracy(&moved, &relabeled).unwrap());
    }

    #[test]
    fn pseudo_labels_ignore_monotone_logit_maps(seed in any::<u64>(), a in 0.1f64..10.0, c in -5.0f64..5.0) {
        let ds = dataset(12, 10, seed);
        let m_s = build_classifier([1, 16, 16], 10, InitSpec::new(seed)).unwrap();
        let g_ts = build_generator([1, 16, 16], InitSpec::new(seed ^ 1)).unwrap();
        let mut m2 = m_s.clone();
        set_final(&mut m2, |_, _, v| a * v, |_, v| a * v + c);
        let x = ds.batch(&(0..12).collect::<Vec<_>>()).0;
        prop_assert_eq!(pseudo_label(&m_s, &g_ts, &x).unwrap(), pseudo_label(&m2, &g_ts, &x).unwrap());
    }

    #[test]
    fn cycle_losses_are_non_negative(seed in any::<u64>()) {
        let ds = dataset(6, 10, seed);
        let other = dataset(6, 10, seed.wrapping_add(1));
        let m = build_classifier([1, 16, 16], 10, InitSpec::new(seed)).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let (x, y) = ds.batch(&idx);
        let y: Vec<usize> = y.into_iter().map(Option::unwrap).collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let cyc = g.constant(other.batch(&idx).0);
        let recon = recon_cycle_loss(&mut g, xv, cyc).unwrap();
        let relaxed = relaxed_cycle_loss(&mut g, &m, cyc, &y).unwrap();
        prop_assert!(g.value(recon).item() >= 0.0);
        prop_assert!(g.value(relaxed).item() >= 0.0);
        let same = recon_cycle_loss(&mut g, xv, xv).unwrap();
        prop_assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn idx_round_trip_is_exact(n in 1usize..8, classes in 2usize..12, seed in any::<u64>()) {
        let ds = dataset(n, classes, seed);
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_idx(&ds, &img, &lab).unwrap();
        let back = load_idx(&img, &lab, "rand", classes, Split::Train).unwrap();
        prop_assert_eq!(back.image_shape(), ds.image_shape());
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert!(back.pixels().iter().zip(ds.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
