//! Property tests for the structural invariants: exact k-NN against a
//! brute-force oracle, permutation equivariance of outlier removal, Chamfer
//! symmetry, and lossless I/O round trips.

use nalgebra::Vector3;
use proptest::prelude::*;

use pseudoflow_core::camera::Grid;
use pseudoflow_core::cloud::{remove_outliers, OutlierParams, PointCloud};
use pseudoflow_core::index::NnIndex;
use pseudoflow_core::io::{read_pfm, read_ply, write_pfm, write_ply, PlyData, PlyFormat};
use pseudoflow_core::losses::{chamfer_loss, FlowField};

fn vec3_strategy(span: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-span..span, -span..span, -span..span).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn cloud_strategy(max_n: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(vec3_strategy(10.0), 1..=max_n)
        .prop_map(|points| PointCloud::new(points).unwrap())
}

fn brute_knn(points: &[Vector3<f64>], query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((query - p).norm_squared(), i))
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.truncate(k);
    all.into_iter().map(|(d2, i)| (i, d2)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_matches_brute_force(
        cloud in cloud_strategy(1024),
        query in vec3_strategy(12.0),
        k in 1usize..16,
    ) {
        let index = NnIndex::build(&cloud.points).unwrap();
        prop_assert_eq!(index.knn(&query, k), brute_knn(&cloud.points, &query, k));
    }

    #[test]
    fn outlier_removal_is_permutation_equivariant(
        cloud in cloud_strategy(96),
        rotate_by in 0usize..96,
    ) {
        let params = OutlierParams { m: 4, ..OutlierParams::default() };
        if cloud.len() < params.m + 1 {
            return Ok(());
        }
        let n = cloud.len();
        let shift = rotate_by % n;
        // A rotation is an easy-to-invert permutation.
        let permuted_points: Vec<Vector3<f64>> =
            (0..n).map(|i| cloud.points[(i + shift) % n]).collect();
        let permuted = PointCloud::new(permuted_points).unwrap();

        let base = remove_outliers(&cloud, &params).unwrap();
        let rotated = remove_outliers(&permuted, &params).unwrap();
        for i in 0..n {
            prop_assert_eq!(base.kept[(i + shift) % n], rotated.kept[i]);
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_nonnegative(
        a in cloud_strategy(64),
        b in cloud_strategy(64),
    ) {
        let index_a = NnIndex::build(&a.points).unwrap();
        let index_b = NnIndex::build(&b.points).unwrap();
        let (ab, _) = chamfer_loss(&a, &b, &index_b).unwrap();
        let (ba, _) = chamfer_loss(&b, &a, &index_a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        let (aa, _) = chamfer_loss(&a, &a, &index_a).unwrap();
        prop_assert_eq!(aa, 0.0);
    }

    #[test]
    fn pfm_roundtrip_is_lossless(
        width in 1usize..24,
        height in 1usize..24,
        seed in any::<u32>(),
    ) {
        // f32-representable values, some invalid.
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(u64::from(seed));
        let values: Vec<f64> = (0..width * height)
            .map(|_| {
                if rng.gen_bool(0.15) {
                    f64::NAN
                } else {
                    f64::from(rng.gen_range(0.01f32..100.0))
                }
            })
            .collect();
        let grid = Grid::from_values(width, height, values).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.pfm");
        write_pfm(&path, &grid).unwrap();
        let loaded = read_pfm(&path).unwrap();
        prop_assert_eq!(grid, loaded);
    }

    #[test]
    fn ply_roundtrip_is_lossless(
        n in 1usize..48,
        seed in any::<u32>(),
        with_flow in any::<bool>(),
        with_pixels in any::<bool>(),
        ascii in any::<bool>(),
    ) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(u64::from(seed));
        let mut f32v = |span: f32| f64::from(rng.gen_range(-span..span));
        let points: Vec<Vector3<f64>> =
            (0..n).map(|_| Vector3::new(f32v(50.0), f32v(50.0), f32v(50.0))).collect();
        let cloud = if with_pixels {
            let pixels = (0..n).map(|_| [f32v(2000.0), f32v(2000.0)]).collect();
            PointCloud::with_source_pixels(points, pixels).unwrap()
        } else {
            PointCloud::new(points).unwrap()
        };
        let flow = with_flow.then(|| {
            FlowField::new((0..n).map(|_| Vector3::new(f32v(2.0), f32v(2.0), f32v(2.0))).collect())
        });
        let data = PlyData {
            cloud,
            flow,
            occluded: None,
            outlier: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.ply");
        let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
        write_ply(&path, &data, format).unwrap();
        let loaded = read_ply(&path).unwrap();
        prop_assert_eq!(data, loaded);
    }
}
