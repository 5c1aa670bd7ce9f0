//! Round trips and corruption handling of the volume, projection and
//! checkpoint files.

use std::path::Path;

use cbct_core::data::{read_projections, read_volume, write_projections, write_volume, Unit, Volume};
use cbct_core::geometry::{ConeBeamGeometry, VolumeGrid};
use cbct_core::models::{read_checkpoint, write_checkpoint, Checkpoint};
use cbct_core::projector::ProjectionStack;
use cbct_core::tensor::Tensor;
use cbct_core::Error;
use proptest::prelude::*;

fn p() -> &'static Path {
    Path::new("buffer")
}

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![-1e6f32..1e6, Just(0.0f32), Just(-0.0f32), Just(f32::MIN_POSITIVE), Just(f32::MAX)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn volume_bytes_round_trip(nx in 1usize..5, ny in 1usize..5, nz in 1usize..5, voxel in 0.1f32..10.0,
                               unit in 0u32..3, seed in proptest::collection::vec(finite_f32(), 64)) {
        let grid = VolumeGrid::new(nx, ny, nz, voxel as f64).unwrap();
        let values: Vec<f32> = (0..grid.len()).map(|i| seed[i % seed.len()]).collect();
        let v = Volume::new(grid, Unit::from_code(unit).unwrap(), values).unwrap();
        let mut buf = Vec::new();
        write_volume(&mut buf, p(), &v).unwrap();
        prop_assert_eq!(buf.len(), 28 + 4 * grid.len());
        let back = read_volume(&buf[..], p()).unwrap();
        prop_assert!(back.values().iter().zip(v.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.grid, grid);
        for cut in [0usize, 3, 27, buf.len() - 1] {
            prop_assert!(read_volume(&buf[..cut], p()).is_err());
        }
    }

    #[test]
    fn projection_bytes_round_trip(views in 1usize..4, rows in 1usize..4, cols in 1usize..4,
                                   steps in proptest::collection::vec(0.5f32..89.0, 4), pitch in 0.1f32..5.0) {
        let angles: Vec<f64> = steps[..views].iter().scan(0.0f32, |a, &s| { *a += s; Some(*a as f64) }).collect();
        let geom = ConeBeamGeometry::new(160.0, 400.0, rows, cols, pitch as f64, angles).unwrap();
        let data: Vec<f32> = (0..geom.n_pixels()).map(|i| i as f32 * 0.1 - 0.35).collect();
        let s = ProjectionStack::new(geom, data).unwrap();
        let mut buf = Vec::new();
        write_projections(&mut buf, p(), &s).unwrap();
        prop_assert_eq!(&read_projections(&buf[..], p()).unwrap(), &s);
        buf.push(0);
        prop_assert!(matches!(read_projections(&buf[..], p()), Err(Error::Format { .. })), "unexpected result");
    }

    #[test]
    fn checkpoint_bytes_round_trip(text in "[ -~\n]{0,80}", shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..4), 0..5),
                                   with_opt in any::<bool>()) {
        let tensors: Vec<(String, Tensor<f32>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                (format!("layer{i}.weight"), Tensor::new(s.clone(), (0..n).map(|k| k as f32 - 1.5).collect()).unwrap())
            })
            .collect();
        let ck = Checkpoint { config_text: text, optimizer: with_opt.then(|| tensors.clone()), tensors };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, p(), &ck).unwrap();
        prop_assert_eq!(&buf[..4], b"CBK1");
        prop_assert_eq!(read_checkpoint(&buf[..], p()).unwrap(), ck);
        prop_assert!(matches!(read_checkpoint(&buf[..buf.len() - 1], p()), Err(Error::Truncated { .. })), "unexpected result");
    }
}

#[test]
fn checkpoint_layout_is_little_endian() {
    let ck = Checkpoint {
        config_text: "lr = 1e-3\n".into(),
        tensors: vec![("w".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())],
        optimizer: None,
    };
    let mut b = Vec::new();
    write_checkpoint(&mut b, p(), &ck).unwrap();
    let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    assert_eq!(u32_at(4), 1);
    assert_eq!(u32_at(8), 10);
    assert_eq!(&b[12..22], b"lr = 1e-3\n");
    assert_eq!(u32_at(22), 1); // tensors
    assert_eq!(u32_at(26), 1); // name length
    assert_eq!(b[30], b'w');
    assert_eq!((u32_at(31), u32_at(35)), (1, 2)); // rank, dim
    assert_eq!(f32::from_le_bytes(b[43..47].try_into().unwrap()), -2.0);
    assert_eq!(b[47], 0); // no optimizer section
    assert_eq!(b.len(), 48);
    let mut bad = b.clone();
    bad[3] = b'2';
    assert!(matches!(read_checkpoint(&bad[..], p()), Err(Error::BadMagic { .. })));
}
