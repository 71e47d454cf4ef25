mod common;

use std::path::Path;

use probekit::activation_io::{read_dump, write_dump, ActivationTensor, HEADER_LEN};
use probekit::numerics::Rng;
use proptest::prelude::*;

#[test]
fn two_hundred_random_tensors_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(99);
    for i in 0..200 {
        let (l, n, d) = (1 + rng.below(5), 1 + rng.below(40), 1 + rng.below(24));
        let mut t = common::random_tensor(&mut rng, l, n, d);
        if i % 10 == 0 {
            // Extremes of the f32 range, subnormals and signed zero.
            let special = [f32::MAX, f32::MIN, f32::MIN_POSITIVE, 1e-45, -0.0];
            let mut v = t.values().to_vec();
            for (slot, s) in v.iter_mut().zip(special) {
                *slot = s;
            }
            t = ActivationTensor::new(l, n, d, v).unwrap();
        }
        let path = dir.path().join(format!("{i}.iprb"));
        write_dump(&t, &path).unwrap();
        let back = read_dump(&path).unwrap();
        let bits = |x: &ActivationTensor| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!((back.layers(), back.tokens(), back.dims()), (l, n, d));
        assert_eq!(bits(&back), bits(&t), "tensor {i}");
    }
}

#[test]
fn every_single_byte_header_corruption_is_detected() {
    let mut rng = Rng::new(5);
    for _ in 0..4 {
        let (l, n, d) = (1 + rng.below(4), 1 + rng.below(9), 1 + rng.below(9));
        let t = common::random_tensor(&mut rng, l, n, d);
        let bytes = t.to_bytes();
        for pos in 0..HEADER_LEN {
            for mask in 1..=255u8 {
                let mut bad = bytes.clone();
                bad[pos] ^= mask;
                assert!(
                    ActivationTensor::from_bytes(&bad, Path::new("fuzz")).is_err(),
                    "byte {pos} mask {mask:#04x}"
                );
            }
        }
    }
}

#[test]
fn truncation_and_padding_are_detected() {
    let t = common::random_tensor(&mut Rng::new(6), 2, 3, 4);
    let bytes = t.to_bytes();
    for cut in 0..bytes.len() {
        assert!(ActivationTensor::from_bytes(&bytes[..cut], Path::new("t")).is_err());
    }
    let mut padded = bytes.clone();
    padded.push(0);
    assert!(ActivationTensor::from_bytes(&padded, Path::new("t")).is_err());
}

proptest! {
    #[test]
    fn arbitrary_finite_payloads_roundtrip(
        l in 1usize..4, n in 1usize..8, d in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let v: Vec<f32> = (0..l * n * d)
            .map(|_| f32::from_bits(rng.next_u64() as u32))
            .map(|x| if x.is_finite() { x } else { 0.5 })
            .collect();
        let t = ActivationTensor::new(l, n, d, v).unwrap();
        let back = ActivationTensor::from_bytes(&t.to_bytes(), Path::new("p")).unwrap();
        prop_assert_eq!(back.to_bytes(), t.to_bytes());
    }
}
