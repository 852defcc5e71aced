// Scratch calibration harness; not part of the deliverable surface.
use std::time::Instant;

use subseg::inference::{classify_roi, compute_roi, largest_component_filter};
use subseg::metrics::evaluate;
use subseg::model::build_model;
use subseg::phantom::default_dataset;
use subseg::sampling::{normalize_intensity, select_samples, Sample, SamplingConfig, SamplingMode};
use subseg::tensor::AdamConfig;
use subseg::trainer::{train, TrainConfig};
use subseg::volume::{AtlasVolume, LabelVolume, ScalarVolume};

fn collect_samples(
    subjects: &[(ScalarVolume, LabelVolume)],
    atlas: &AtlasVolume,
    mode: SamplingMode,
    seed: u64,
) -> Vec<Sample> {
    let mut samples = Vec::new();
    for (i, (image, labels)) in subjects.iter().enumerate() {
        let normalized = normalize_intensity(image).unwrap();
        let config = SamplingConfig {
            mode,
            boundary_distance: 5,
            seed: seed.wrapping_add(i as u64),
        };
        samples.extend(select_samples(&normalized, labels, atlas, &config).unwrap().samples);
    }
    samples
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let which = args.get(3).cloned().unwrap_or_else(|| "full".into());
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().unwrap();
    let seed = 42u64;

    let t0 = Instant::now();
    let dataset = default_dataset(6, seed).unwrap();
    let (test_image, test_labels) = &dataset.subjects[5];
    let test_normalized = normalize_intensity(test_image).unwrap();
    let roi = compute_roi(&dataset.atlas, 0.0, 8).unwrap();
    eprintln!(
        "[{:?}] ROI {} voxels; epochs={epochs} lr={lr} which={which}",
        t0.elapsed(),
        roi.voxel_count()
    );

    let configs: Vec<(&str, bool, SamplingMode)> = match which.as_str() {
        "full" => vec![("full", true, SamplingMode::BoundaryRestricted)],
        "ablations" => vec![
            ("no-atlas", false, SamplingMode::BoundaryRestricted),
            ("random", true, SamplingMode::RandomBackground),
        ],
        _ => vec![
            ("full", true, SamplingMode::BoundaryRestricted),
            ("no-atlas", false, SamplingMode::BoundaryRestricted),
            ("random", true, SamplingMode::RandomBackground),
        ],
    };

    for (name, use_atlas, mode) in configs {
        let t = Instant::now();
        let samples = collect_samples(&dataset.subjects[..5], &dataset.atlas, mode, seed);
        let n = samples.len();
        let model = build_model::<f32>(seed, use_atlas);
        let config = TrainConfig {
            epochs_max: epochs,
            seed,
            adam: AdamConfig { learning_rate: lr, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let (trained, history) = train(model, samples, &config).unwrap();
        let t_train = t.elapsed();
        let raw = classify_roi(&trained, &test_normalized, &dataset.atlas, &roi, 128).unwrap();
        let filtered = largest_component_filter(&raw);
        let report = evaluate(&filtered, test_labels).unwrap();
        let min = report.classes.iter().map(|c| c.dsc).fold(f64::INFINITY, f64::min);
        eprintln!(
            "{name}: n={n} train {t_train:?} seg {:?} history {:?}",
            t.elapsed() - t_train,
            history.records.iter().map(|r| (r.loss, r.val_acc)).collect::<Vec<_>>()
        );
        eprintln!("{name}: mean {:.4} min {:.4}", report.avg_dsc, min);
        for c in &report.classes {
            eprint!(" {}:{:.3}", c.id, c.dsc);
        }
        eprintln!();
    }
    eprintln!("total {:?}", t0.elapsed());
}
