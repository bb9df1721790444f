use std::collections::BTreeMap;

use geo::Coord;
use proptest::prelude::*;

use transit_did::design::{DesignAssignment, Role, Status};
use transit_did::geodata::{buffer_trajectory, SpatialWeights, TimedPoint, Trajectory};
use transit_did::ingest::{load_gps, write_gps, GpsStreams, ZoneFlows};
use transit_did::nbdid::{cluster_robust_cov, fit_nb, DesignMatrix, FitOptions};
use transit_did::regionalize::{
    calinski_harabasz, canonical_labels, kmeans, standardize, ward_cluster, ward_unconstrained,
    KMeansConfig,
};
use transit_did::spatial_stats::{morans_i, morans_perm_test};

fn ring_weights(n: usize) -> SpatialWeights {
    SpatialWeights::from_neighbors((0..n).map(|i| vec![(i + 1) % n, (i + n - 1) % n]).collect())
}

fn points(max_n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-50.0..50.0f64, d), 6..max_n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moran_is_affine_invariant(x in prop::collection::vec(-100.0..100.0f64, 5..40), a in 0.01..20.0f64, b in -1e3..1e3f64) {
        let w = ring_weights(x.len());
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let i = morans_i(&x, &w).unwrap();
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((morans_i(&y, &w).unwrap() - i).abs() < 1e-9);
        // negation flips the sign of the deviations, not of I
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((morans_i(&z, &w).unwrap() - i).abs() < 1e-9);
    }

    #[test]
    fn permutation_p_is_a_valid_probability(x in prop::collection::vec(-10.0..10.0f64, 5..20), seed in any::<u64>()) {
        let w = ring_weights(x.len());
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let r = morans_perm_test(&x, &w, 99, seed).unwrap();
        prop_assert!(r.p_perm >= 0.01 && r.p_perm <= 1.0);
        prop_assert_eq!(r, morans_perm_test(&x, &w, 99, seed).unwrap());
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_variance(x in points(30, 3)) {
        prop_assume!((0..3).all(|j| {
            let lo = x.iter().map(|r| r[j]).fold(f64::MAX, f64::min);
            let hi = x.iter().map(|r| r[j]).fold(f64::MIN, f64::max);
            hi - lo > 1e-3
        }));
        let z = standardize(&x).unwrap();
        let n = z.len() as f64;
        for j in 0..3 {
            let mean = z.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = z.iter().map(|r| r[j] * r[j]).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ch_ignores_label_names(x in points(25, 2), seed in 0..50u64) {
        let k = 3;
        let km = kmeans(&x, k, seed, &KMeansConfig::default()).unwrap();
        prop_assume!((0..k).all(|c| km.labels.iter().filter(|l| **l == c).count() > 0));
        let swapped: Vec<usize> = km.labels.iter().map(|l| (l + 1) % k).collect();
        let a = calinski_harabasz(&x, &km.labels).unwrap();
        let b = calinski_harabasz(&x, &swapped).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn kmeans_inertia_never_increases(x in points(40, 2), k in 2..6usize, seed in any::<u64>()) {
        let r = kmeans(&x, k, seed, &KMeansConfig::default()).unwrap();
        for t in &r.traces {
            prop_assert!(t.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn ward_on_complete_graph_matches_unconstrained(x in points(20, 2), k in 2..5usize) {
        let n = x.len();
        let complete = SpatialWeights::from_neighbors((0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect());
        let (con, _) = ward_cluster(&x, k, Some(&complete)).unwrap();
        prop_assert_eq!(canonical_labels(&con), canonical_labels(&ward_unconstrained(&x, k).unwrap()));
    }

    #[test]
    fn buffers_grow_with_radius(
        pts in prop::collection::vec((-500.0..500.0f64, -500.0..500.0f64), 2..6),
        r1 in 5.0..200.0f64,
        extra in 1.0..200.0f64,
        probe in (-800.0..800.0f64, -800.0..800.0f64),
    ) {
        let tp: Vec<TimedPoint> = pts.iter().enumerate().map(|(k, &(x, y))| TimedPoint { x, y, t: k as f64 }).collect();
        let traj = Trajectory::new("p", tp).unwrap();
        let small = buffer_trajectory(&traj, r1).unwrap();
        let large = buffer_trajectory(&traj, r1 + extra).unwrap();
        let p = Coord { x: probe.0, y: probe.1 };
        prop_assert!(!small.contains_point(p) || large.contains_point(p));
    }

    #[test]
    fn design_statuses_partition_zones(
        zones in prop::collection::vec((0.0..12.0f64, 0.0..12.0f64, any::<bool>(), prop::option::of(0..3usize)), 1..40),
        threshold in 0.5..10.0f64,
    ) {
        let n = zones.len();
        let flows = ZoneFlows {
            origin_counts: zones.iter().map(|z| (z.0 * 10.0).round() as u64).collect(),
            destination_counts: zones.iter().map(|z| (z.1 * 10.0).round() as u64).collect(),
            origin_mean: zones.iter().map(|z| z.0).collect(),
            destination_mean: zones.iter().map(|z| z.1).collect(),
            n_days: 10,
            outside_origins: 0,
            outside_destinations: 0,
        };
        let contact: Vec<bool> = zones.iter().map(|z| z.2).collect();
        let region: Vec<Option<usize>> = zones.iter().map(|z| z.3).collect();
        for role in Role::ALL {
            let d = DesignAssignment::new(role, &flows, &contact, region.clone(), threshold);
            let mut total = 0;
            for r in 0..3 {
                let (c, t) = d.counts(r);
                total += c + t;
            }
            let excluded = d.status.iter().filter(|s| **s == Status::Excluded).count();
            prop_assert_eq!(total + excluded, n);
            for i in 0..n {
                let flow = role.flows(&flows)[i];
                match d.status[i] {
                    Status::Treatment => prop_assert!(flow >= threshold && region[i].is_some()),
                    Status::Control => prop_assert!(!contact[i] && !flows.any_activity(i) && region[i].is_some()),
                    Status::Excluded => prop_assert!(region[i].is_none() || flow < threshold),
                }
            }
        }
    }

    #[test]
    fn gps_csv_round_trip(
        devices in prop::collection::btree_map("[a-z]{1,6}", prop::collection::vec((-1e6..1e6f64, -1e6..1e6f64, 0u32..86_400), 1..20), 1..4),
    ) {
        let base = 1_559_520_000.0;
        let devices: BTreeMap<String, Vec<TimedPoint>> = devices
            .into_iter()
            .map(|(id, fixes)| {
                let mut t = base;
                let pts = fixes
                    .into_iter()
                    .map(|(x, y, dt)| {
                        t += dt as f64 + 1.0;
                        TimedPoint { x: (x * 1000.0).round() / 1000.0, y: (y * 1000.0).round() / 1000.0, t }
                    })
                    .collect();
                (id, pts)
            })
            .collect();
        let streams = GpsStreams { devices };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gps.csv");
        write_gps(&streams, std::fs::File::create(&path).unwrap()).unwrap();
        prop_assert_eq!(load_gps(&path).unwrap(), streams);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn clustered_covariance_is_symmetric_psd(seed in any::<u64>(), groups in 3..12usize) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = groups * 8;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y: Vec<f64> = rows.iter().map(|r| (r[1] * 6.0 + r[2] * 3.0 + rng.random::<f64>() * 4.0).floor()).collect();
        let names = ["a", "b", "c"].map(String::from).to_vec();
        let dm = DesignMatrix::from_rows(names, &rows, y).unwrap().with_clusters((0..n).map(|i| i % groups).collect());
        let fit = fit_nb(&dm, &FitOptions::default()).unwrap();
        let v = cluster_robust_cov(&fit, &dm).unwrap();
        prop_assert!((&v - v.transpose()).abs().max() < 1e-12 * v.abs().max().max(1.0));
        prop_assert!(v.symmetric_eigenvalues().iter().all(|e| *e >= -1e-10 * v.abs().max()));
    }
}
