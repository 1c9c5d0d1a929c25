// Calibration harness for the acceptance-experiment configurations.
use tuned::fusion::FusionBackend;
use tuned::pipeline::metrics::{evaluate, Split};
use tuned::pipeline::*;

fn criterion6_probe(lambda_t: f64, lr: f64, sep: f64, classes: usize, sigma: f64, epochs: usize) {
    let mut pruned_count = 0;
    let mut ratios = Vec::new();
    for seed in 0..10u64 {
        let ds = gen_synthetic(&SyntheticSpec::uniform(600, 3, classes, 16, sep, 100 + seed)).unwrap();
        let mut settings = TrainSettings { epochs, seed, ..TrainSettings::default() };
        settings.loss.lambda_t = lambda_t;
        settings.learning_rate = lr;
        let out = train(&ds, &settings).unwrap();
        let conf = inject_conflict(&ds, &ConflictSpec { views: vec![2], mode: ConflictMode::Noise { sigma }, seed: 900 + seed }).unwrap();
        let outs = eval_outputs(&out.model, &conf, Split::Test).unwrap();
        let g = outs.fused.graph.as_ref().unwrap();
        let fully_pruned = !g.edge_mask[2][0] && !g.edge_mask[2][1] && !g.edge_mask[0][2] && !g.edge_mask[1][2];
        if fully_pruned { pruned_count += 1; }
        let w_max = g.weights.get(0,1).max(g.weights.get(0,2)).max(g.weights.get(1,2));
        let bad_max = g.weights.get(0,2).max(g.weights.get(1,2));
        ratios.push(bad_max / w_max);
    }
    let rstr: Vec<String> = ratios.iter().map(|r| format!("{:.2}", r)).collect();
    println!("c6 lt={lambda_t} lr={lr} sep={sep} K={classes} sigma={sigma} ep={epochs}: pruned {pruned_count}/10 ratios {:?}", rstr);
}

fn criterion7_probe(lambda_t: f64, lr: f64, sep: f64, epochs: usize, sigma: f64) {
    let backends = [FusionBackend::SMrf, FusionBackend::Dst, FusionBackend::Average];
    let mut normal = vec![Vec::new(); 3];
    let mut conflict = vec![Vec::new(); 3];
    let mut u_clean = Vec::new();
    let mut u_conf = Vec::new();
    let t0 = std::time::Instant::now();
    for seed in 0..10u64 {
        let ds = gen_synthetic(&SyntheticSpec::uniform(1000, 4, 5, 16, sep, 500 + seed)).unwrap();
        let conf = inject_conflict(&ds, &ConflictSpec { views: vec![3], mode: ConflictMode::Noise { sigma }, seed: 700 + seed }).unwrap();
        for (b, backend) in backends.iter().enumerate() {
            let mut settings = TrainSettings { epochs, seed, backend: *backend, ..TrainSettings::default() };
            settings.loss.lambda_t = lambda_t;
            settings.learning_rate = lr;
            let out = train(&ds, &settings).unwrap();
            let rep_n = evaluate(&out.model, &ds, Split::Test).unwrap();
            let rep_c = evaluate(&out.model, &conf, Split::Test).unwrap();
            normal[b].push(rep_n.fused.accuracy);
            conflict[b].push(rep_c.fused.accuracy);
            if b == 0 {
                u_clean.push(rep_n.fused.mean_uncertainty);
                u_conf.push(rep_c.fused.mean_uncertainty);
            }
        }
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
        (m, sd)
    };
    println!("c7 lt={lambda_t} lr={lr} sep={sep} ep={epochs} sigma={sigma} ({:?})", t0.elapsed());
    for (b, backend) in backends.iter().enumerate() {
        let (nm, ns) = stats(&normal[b]);
        let (cm, cs) = stats(&conflict[b]);
        println!("  {:8}: normal {:.3}±{:.3}  conflict {:.3}±{:.3}", backend.name(), nm, ns, cm, cs);
    }
    let (ucm, _) = stats(&u_clean);
    let (ufm, _) = stats(&u_conf);
    println!("  smrf mean u: clean {:.3} conflict {:.3}", ucm, ufm);
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("c6");
    match which {
        "c6" => {
            criterion6_probe(1.0, 0.003, 1.0, 5, 10.0, 150);
            criterion6_probe(0.1, 0.01, 1.0, 5, 10.0, 150);
        }
        "c7a" => criterion7_probe(0.1, 0.01, 0.6, 150, 1.0),
        "c7b" => criterion7_probe(0.1, 0.01, 0.8, 150, 1.0),
        "c7c" => criterion7_probe(0.1, 0.01, 0.5, 150, 1.0),
        _ => {}
    }
}
