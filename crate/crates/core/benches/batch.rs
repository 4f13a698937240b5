//! Sequential vs data-parallel lifting and evaluation on a synthetic batch.
//!
//! ```text
//! cargo bench -p lift3d --bench batch
//! ```

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lift3d::dataset::Detection;
use lift3d::metrics::{aavp, default_aavp_grid, ApMode, ScoredPrediction};
use lift3d::spatial::{fit_spatial, KeypointCandidate, SpatialAnnotation, SpatialModelFile};
use lift3d::synth::{builtin_registry, gen_synthetic, SynthConfig, SynthOutput};
use lift3d::{lift_batch, Execution, LiftContext, LiftInput, LiftOptions, Point2};

const SCENES: usize = 256;

fn fixture() -> (SynthOutput, SpatialModelFile, Vec<Vec<KeypointCandidate>>) {
    let reg = builtin_registry("car");
    let out = gen_synthetic(&reg, &SynthConfig { scenes: SCENES, noise: 1.0, distractors: 2, seed: 3, ..Default::default() })
        .unwrap();
    let anns: Vec<SpatialAnnotation> = out
        .dataset
        .objects
        .iter()
        .map(|o| SpatialAnnotation { bbox: o.bbox, azimuth: o.azimuth, keypoints: o.visible_keypoints() })
        .collect();
    let spatial = SpatialModelFile::new(vec![fit_spatial("car", &anns, 8, 3.0, 0.05).unwrap()], serde_json::Value::Null);
    let cands = out
        .detections
        .iter()
        .map(|d| {
            out.candidates
                .iter()
                .filter(|c| c.image_id == d.image_id)
                .map(|c| KeypointCandidate { name: c.name.clone(), position: Point2::new(c.x, c.y), score: c.score })
                .collect()
        })
        .collect();
    (out, spatial, cands)
}

fn inputs<'a>(dets: &'a [Detection], cands: &'a [Vec<KeypointCandidate>], truth: &[f64]) -> Vec<LiftInput<'a>> {
    dets.iter()
        .zip(cands)
        .zip(truth)
        .map(|((d, c), &a)| LiftInput { detection: d, candidates: c, image_size: (640.0, 480.0), azimuth_estimate: Some(a + 5.0) })
        .collect()
}

fn bench_lift(c: &mut Criterion) {
    let reg = builtin_registry("car");
    let (out, spatial, cands) = fixture();
    let truth: Vec<f64> = out.dataset.objects.iter().map(|o| o.azimuth).collect();
    let batch = inputs(&out.detections, &cands, &truth);
    let options = LiftOptions::default();
    let ctx = LiftContext { registry: &reg, spatial: &spatial, priors: &out.dataset.priors, options: &options };

    let mut g = c.benchmark_group("lift_batch");
    g.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(BenchmarkId::new(format!("{exec:?}"), SCENES), &exec, |b, &exec| {
            b.iter(|| lift_batch(&batch, &ctx, exec))
        });
    }
    g.finish();
}

fn bench_eval(c: &mut Criterion) {
    let (out, _, _) = fixture();
    let preds: Vec<ScoredPrediction> = out
        .detections
        .iter()
        .zip(&out.dataset.objects)
        .enumerate()
        .map(|(i, (d, o))| ScoredPrediction {
            image_id: d.image_id.clone(),
            class: d.class.clone(),
            bbox: d.bbox,
            score: (i % 17) as f64 / 17.0,
            azimuth: Some(o.azimuth + (i % 40) as f64),
        })
        .collect();
    // eight independent evaluations, as when scoring one class per worker
    let jobs: Vec<usize> = (0..8).collect();
    let grid = default_aavp_grid();
    let mut g = c.benchmark_group("aavp");
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(BenchmarkId::new(format!("{exec:?}"), jobs.len()), &exec, |b, &exec| {
            b.iter(|| exec.map(&jobs, |_| aavp(&preds, &out.dataset.objects, &grid, ApMode::AllPoints).unwrap().aavp))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_lift, bench_eval);
criterion_main!(benches);
