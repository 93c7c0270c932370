//! Kept in its own binary so no other test competes for the CPU while timing.

use bevalign_cli::bench::{bench, STAGES};
use bevalign_cli::config::{BenchConfig, RunConfig};

#[test]
fn repeat_runs_agree_within_half() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        lidar_rays: 32 * 600,
        out: dir.path().to_path_buf(),
        bench: BenchConfig {
            knn_sizes: vec![1_000, 10_000],
            ..BenchConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.recovery.optimizer.iterations = 100;
    let a = bench(&cfg).unwrap();
    let b = bench(&cfg).unwrap();
    let names: Vec<&str> = a.timing.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, STAGES);
    for (x, y) in a.timing.stages.iter().zip(&b.timing.stages) {
        assert_eq!(x.samples_ms.len(), 5);
        // sub-millisecond stages are dominated by scheduler noise
        if x.median_ms.max(y.median_ms) < 5.0 {
            continue;
        }
        let spread = (x.median_ms - y.median_ms).abs() / x.median_ms.min(y.median_ms);
        assert!(spread < 0.5, "{}: {} vs {} ms", x.name, x.median_ms, y.median_ms);
    }
    assert!(a.timing.knn_scaling[1].ratio < a.timing.knn_scaling[0].ratio);
}
