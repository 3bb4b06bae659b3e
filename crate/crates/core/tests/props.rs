//! Property tests for the structural invariants: file round-trips, metric
//! identities, and transform correspondence.

use colabseg::metrics::{assd, dice, iou, ravd};
use colabseg::mhd::{read_metaimage, write_metaimage, ElementType};
use colabseg::volume::{AugTransform, Volume};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn arb_mask(max: usize) -> impl Strategy<Value = Array3<u8>> {
    (2usize..=4, 3usize..=max, 3usize..=max, any::<u64>()).prop_map(|(n, h, w, seed)| {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let density = rng.gen_range(0.1..0.9);
        Array3::from_shape_fn((n, h, w), |_| u8::from(rng.gen_bool(density)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metaimage_float_roundtrip_is_bit_exact(
        n in 3usize..6, h in 4usize..10, w in 4usize..10, seed in any::<u64>(), msb in any::<bool>()
    ) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let voxels = Array3::from_shape_fn((n, h, w), |_| rng.gen_range(-1e3f32..1e3));
        let v = Volume::new("prop", voxels, [0.3, 0.7, 2.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.mhd");
        write_metaimage(&v, &path, ElementType::Float, msb).unwrap();
        let back = read_metaimage(&path).unwrap();
        prop_assert_eq!(v.voxels.dim(), back.voxels.dim());
        for (a, b) in v.voxels.iter().zip(back.voxels.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn iou_equals_dice_over_two_minus_dice(p in arb_mask(10), r in arb_mask(10)) {
        // Align shapes by cropping to the common box.
        let (n, h, w) = (
            p.dim().0.min(r.dim().0),
            p.dim().1.min(r.dim().1),
            p.dim().2.min(r.dim().2),
        );
        let pc = p.slice(ndarray::s![..n, ..h, ..w]).to_owned();
        let rc = r.slice(ndarray::s![..n, ..h, ..w]).to_owned();
        let d = dice(&pc, &rc).unwrap();
        let j = iou(&pc, &rc).unwrap();
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-9);
    }

    #[test]
    fn metrics_invariant_under_common_rotation(p in arb_mask(8), r in arb_mask(8)) {
        let (n, h, w) = (
            p.dim().0.min(r.dim().0),
            p.dim().1.min(r.dim().1),
            p.dim().2.min(r.dim().2),
        );
        let pc = p.slice(ndarray::s![..n, ..h, ..w]).to_owned();
        let rc = r.slice(ndarray::s![..n, ..h, ..w]).to_owned();
        // Rotate both masks 180 degrees in-plane (shape-preserving for any
        // h, w) by flipping both spatial axes.
        let rot = |m: &Array3<u8>| -> Array3<u8> {
            let mut v = m.view();
            v.invert_axis(ndarray::Axis(1));
            v.invert_axis(ndarray::Axis(2));
            v.to_owned().as_standard_layout().to_owned()
        };
        let pr = rot(&pc);
        let rr = rot(&rc);
        prop_assert_eq!(dice(&pc, &rc).unwrap(), dice(&pr, &rr).unwrap());
        prop_assert_eq!(iou(&pc, &rc).unwrap(), iou(&pr, &rr).unwrap());
        match (ravd(&pc, &rc), ravd(&pr, &rr)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "ravd definedness changed under rotation"),
        }
        let spacing = [1.0, 1.0, 1.0];
        match (assd(&pc, &rc, spacing), assd(&pr, &rr, spacing)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "assd definedness changed under rotation"),
        }
    }

    #[test]
    fn augment_correspondence_via_indicators(
        pr in 0usize..8, pc in 0usize..8, q in 0u8..4, flip in any::<bool>()
    ) {
        // A lit pixel travels identically through the image and the mask.
        let t = AugTransform { quarter_turns: q, hflip: flip };
        let mut img = Array2::<f32>::zeros((8, 8));
        let mut mask = Array2::<u8>::zeros((8, 8));
        img[[pr, pc]] = 1.0;
        mask[[pr, pc]] = 1;
        let ai = t.apply(&img);
        let am = t.apply(&mask);
        let ipos = ai.indexed_iter().find(|(_, &v)| v != 0.0).unwrap().0;
        let mpos = am.indexed_iter().find(|(_, &v)| v != 0).unwrap().0;
        prop_assert_eq!(ipos, mpos);
    }

    #[test]
    fn fused_mask_is_subset_and_commutative(seed in any::<u64>()) {
        use colabseg::fusion::fuse;
        use colabseg::labels::{Provenance, PseudoMask};
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let a = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..2u8));
        let b = Array2::from_shape_fn((h, w), |_| rng.gen_range(0..2u8));
        let semi = PseudoMask::new("v", 0, a.clone(), Provenance::Semi).unwrap();
        let ssl = PseudoMask::new("v", 0, b.clone(), Provenance::Ssl).unwrap();
        let f = fuse(&semi, &ssl).unwrap();
        for ((r, c), &v) in f.mask.indexed_iter() {
            prop_assert_eq!(v, a[[r, c]] & b[[r, c]]);
        }
        let semi2 = PseudoMask::new("v", 0, b, Provenance::Semi).unwrap();
        let ssl2 = PseudoMask::new("v", 0, a, Provenance::Ssl).unwrap();
        prop_assert_eq!(fuse(&semi2, &ssl2).unwrap().mask, f.mask);
    }
}
