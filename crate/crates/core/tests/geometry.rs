mod common;

use mcupatch_core::geometry::{
    backward_region, mac_report, patch_macs, receptive_field, tile_spans, BorderMode, PatchGeometry, Rect, Span,
};
use common::{bbox, rect_mask, taint};
use mcupatch_core::net::{mobilenet_v2, mobilenet_v2_rd, MBV2_RD_PATCH_BLOCKS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_span(rng: &mut ChaCha8Rng, side: u32) -> Span {
    use rand::Rng;
    let a = rng.gen_range(0..side as i64);
    let b = rng.gen_range(a + 1..=side as i64);
    Span::new(a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn backward_region_matches_taint_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = common::random_chain(&mut rng, 6, 48, 1, false);
        let out = chain.output();
        let rect = Rect::new(random_span(&mut rng, out.height), random_span(&mut rng, out.width));
        let masks = taint(&chain, chain.len(), &rect_mask(out, rect));
        let oracle = bbox(&masks[0], chain.input.width).unwrap();
        prop_assert_eq!(backward_region(&chain.layers, rect), oracle);
    }

    #[test]
    fn clipped_patch_macs_match_taint_oracle(seed in any::<u64>(), p in 2u32..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = common::random_chain(&mut rng, 6, 40, 1, false);
        let n = 1 + (seed % chain.blocks.len() as u64) as usize;
        let Ok(g) = PatchGeometry::new(&chain, n, p, BorderMode::Clipped) else { return Ok(()) };
        let end = g.stage_end;
        let tiles = tile_spans(chain.tensor(end).height, p);
        let mut oracle = 0u64;
        for rows in &tiles {
            for cols in &tiles {
                let masks = taint(&chain, end, &rect_mask(chain.tensor(end), Rect::new(*rows, *cols)));
                for i in 0..end {
                    let area = bbox(&masks[i + 1], chain.tensor(i + 1).width).map_or(0, |r| r.area());
                    oracle += chain.layers[i].macs_per_pixel() * area;
                }
            }
        }
        prop_assert_eq!(patch_macs(&chain, &g), oracle);
    }

    #[test]
    fn patch_macs_at_least_layer_macs(seed in any::<u64>(), p in 1u32..=4, uniform in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = common::random_chain(&mut rng, 8, 48, 1, true);
        let n = 1 + (seed % chain.blocks.len() as u64) as usize;
        let mode = if uniform { BorderMode::Uniform } else { BorderMode::Clipped };
        let Ok(g) = PatchGeometry::new(&chain, n, p, mode) else { return Ok(()) };
        let r = mac_report(&chain, &g);
        prop_assert!(r.stage_patch >= r.stage_layer);
        prop_assert!(r.total_patch >= r.total_layer);
        // No halo exactly when nothing after the first MAC layer widens the
        // receptive field.
        let end = g.stage_end;
        let halo_free = p == 1
            || (0..end).all(|i| chain.layers[i].macs_per_pixel() == 0 || chain.layers[i + 1..end].iter().all(|l| l.kernel == 1));
        prop_assert_eq!(r.stage_patch == r.stage_layer, halo_free, "{:?}", r);
    }

    #[test]
    fn tiles_partition(size in 1u32..300, p in 1u32..=8) {
        prop_assume!(p <= size);
        let t = tile_spans(size, p);
        prop_assert_eq!(t.len(), p as usize);
        prop_assert_eq!(t[0].start, 0);
        prop_assert_eq!(t[t.len() - 1].end, size as i64);
        for w in t.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
            prop_assert!(w[0].len() >= w[1].len() && w[0].len() - w[1].len() <= 1);
        }
    }

    #[test]
    fn uniform_regions_contain_clipped(seed in any::<u64>(), p in 2u32..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = common::random_chain(&mut rng, 8, 48, 1, true);
        let n = 1 + (seed % chain.blocks.len() as u64) as usize;
        let Ok(g) = PatchGeometry::new(&chain, n, p, BorderMode::Uniform) else { return Ok(()) };
        for t in 0..=g.stage_end {
            for k in 0..p as usize {
                prop_assert!(g.unclipped_span(t, k).contains_span(g.clipped_span(t, k)));
                prop_assert!(g.clipped_span(t, k).contains_span(g.unclipped_span(t, k).clip(g.extent(t))));
            }
        }
    }
}

#[test]
fn receptive_field_matches_taint_oracle() {
    let mut exact = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = common::random_chain(&mut rng, 6, 48, 1, false);
        let rf = receptive_field(&chain.layers).size;
        let out = chain.output();
        for oy in 0..out.height as i64 {
            let px = Rect::new(Span::new(oy, oy + 1), Span::new(oy, oy + 1));
            let masks = taint(&chain, chain.len(), &rect_mask(out, px));
            let r = bbox(&masks[0], chain.input.width).unwrap();
            assert!(r.rows.len() <= rf, "seed {seed}");
            // Footprints that never touch a tensor border have exactly the
            // receptive-field size.
            let interior = masks.iter().enumerate().all(|(t, m)| {
                let side = chain.tensor(t).width as i64;
                bbox(m, side as u32).is_some_and(|b| b.rows.start > 0 && b.rows.end < side)
            });
            if interior {
                assert_eq!(r.rows.len(), rf, "seed {seed}, row {oy}");
                exact += 1;
            }
        }
    }
    assert!(exact > 100, "only {exact} interior footprints checked");
}

#[test]
fn patch_macs_grow_with_p() {
    let chain = mobilenet_v2().lower().unwrap();
    // n = 1 is the stem alone, which has no halo
    for n in 2..=10 {
        let macs: Vec<u64> = (1..=4)
            .map(|p| mac_report(&chain, &PatchGeometry::new(&chain, n, p, BorderMode::Uniform).unwrap()).stage_patch)
            .collect();
        assert!(macs.windows(2).all(|w| w[0] < w[1]), "n = {n}: {macs:?}");
    }
}

#[test]
fn mbv2_patch_sides() {
    let chain = mobilenet_v2().lower().unwrap();
    let g = PatchGeometry::new(&chain, 5, 4, BorderMode::Uniform).unwrap();
    assert_eq!(g.input_patch_side(), 75);
    assert_eq!(g.stride_tile_side(&chain), 56);
    let rd = mobilenet_v2_rd().lower().unwrap();
    let g = PatchGeometry::new(&rd, MBV2_RD_PATCH_BLOCKS, 4, BorderMode::Uniform).unwrap();
    assert_eq!(g.input_patch_side(), 63);
}

#[test]
fn oversized_p_is_rejected() {
    let chain = mobilenet_v2().with_resolution(32).lower().unwrap();
    // 32 -> 16 -> 16 -> 8 -> 8 -> 4 over the first five blocks
    assert_eq!(chain.tensor(chain.stage_end(5).unwrap()).height, 4);
    assert!(PatchGeometry::new(&chain, 5, 4, BorderMode::Uniform).is_ok());
    assert!(PatchGeometry::new(&chain, 5, 5, BorderMode::Uniform).is_err());
    assert!(PatchGeometry::new(&chain, 5, 0, BorderMode::Uniform).is_err());
}
