//! Packed-format properties: fuzzed roundtrips, closed-form sizes, and
//! agreement between the live and packed dequantization paths.

use proptest::prelude::*;

use scalebits::quant::pack::{
    pack_tensor, payload_len, predicted_file_len, read_packed_file, unpack_tensor,
    write_packed_file,
};
use scalebits::quant::{rtn_quantize_group, BlockCodes, QuantConfig};

fn arb_block(gs: usize) -> impl Strategy<Value = (u8, Vec<Vec<f64>>)> {
    // bits 0..=8; per-group values in a few magnitude regimes
    (0u8..=8, 1usize..4, -3.0f64..3.0).prop_flat_map(move |(bits, n_groups, center)| {
        let group = prop::collection::vec(
            prop::num::f64::NORMAL.prop_map(move |v| center + (v % 5.0)),
            gs,
        );
        (Just(bits), prop::collection::vec(group, n_groups))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn roundtrip_is_exact((bits, groups) in arb_block(8)) {
        let cfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
        let n_groups = groups.len();
        let quantized: Vec<_> = if bits == 0 {
            Vec::new()
        } else {
            groups.iter().map(|g| rtn_quantize_group(g, bits, &cfg).unwrap()).collect()
        };
        // One block of 1 row x (8 * n_groups) cols.
        let cols = 8 * n_groups;
        let block = BlockCodes { bits, groups: quantized };
        let pt = pack_tensor(1, cols, 1, cols, 8, std::slice::from_ref(&block)).unwrap();
        prop_assert_eq!(
            pt.payload.len(),
            payload_len(1, cols as u32, 1, cols as u32, 8, &pt.block_bits)
        );
        let back = unpack_tensor(&pt).unwrap();
        prop_assert_eq!(back, vec![block]);

        // Whole-file roundtrip with the closed-form size.
        let mut buf = Vec::new();
        write_packed_file(&mut buf, std::slice::from_ref(&pt)).unwrap();
        prop_assert_eq!(buf.len(), predicted_file_len(std::slice::from_ref(&pt)));
        let tensors = read_packed_file(buf.as_slice()).unwrap();
        prop_assert_eq!(tensors, vec![pt]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn quantize_dequantize_quantize_is_stable(
        vals in prop::collection::vec(-10.0f64..10.0, 16),
        bits in 1u8..=8,
    ) {
        // Only zero-straddling or constant groups carry the exactness
        // guarantee; recenter so the range straddles zero.
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mid = (lo + hi) / 2.0;
        let vals: Vec<f64> = vals.iter().map(|v| v - mid).collect();
        let cfg = QuantConfig { group_size: 16, ..QuantConfig::default() };
        let q1 = rtn_quantize_group(&vals, bits, &cfg).unwrap();
        let d1 = q1.dequant();
        let q2 = rtn_quantize_group(&d1, bits, &cfg).unwrap();
        prop_assert_eq!(q2.dequant(), d1);
    }
}

#[test]
fn truncated_file_reports_offset() {
    let cfg = QuantConfig { group_size: 8, ..QuantConfig::default() };
    let g = rtn_quantize_group(&[0.5, -0.25, 1.0, 2.0, -1.5, 0.0, 0.75, -2.0], 5, &cfg).unwrap();
    let pt = pack_tensor(1, 8, 1, 8, 8, &[BlockCodes { bits: 5, groups: vec![g] }]).unwrap();
    let mut buf = Vec::new();
    write_packed_file(&mut buf, &[pt]).unwrap();
    for cut in [3, 5, 9, 22, buf.len() - 1] {
        let r = read_packed_file(&buf[..cut]);
        match r {
            Err(scalebits::Error::Format { .. }) => {}
            other => panic!("cut {cut}: expected format error, got {other:?}"),
        }
    }
}
