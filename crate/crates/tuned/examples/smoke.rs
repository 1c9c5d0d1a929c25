use tuned::pipeline::*;
use tuned::pipeline::metrics::{evaluate, Split};

fn main() {
    let ds = gen_synthetic(&SyntheticSpec::uniform(1000, 4, 5, 16, 1.0, 42)).unwrap();
    let settings = TrainSettings { epochs: 300, seed: 1, ..TrainSettings::default() };
    let t1 = std::time::Instant::now();
    let out = train(&ds, &settings).unwrap();
    println!("trained {} epochs in {:?}, diverged={:?}", out.log.len(), t1.elapsed(), out.diverged);
    for rec in out.log.iter().step_by(50) {
        println!("epoch {:3}  loss {:.4}  ace {:.4} kl {:.4} con {:.4}  acc {:.3}", rec.epoch, rec.loss_total, rec.loss_ace_mean, rec.loss_kl_mean, rec.loss_con, rec.train_acc);
    }
    let last = out.log.last().unwrap();
    println!("final: epoch {} loss {:.4} acc {:.3}", last.epoch, last.loss_total, last.train_acc);
    let rep = evaluate(&out.model, &ds, Split::Test).unwrap();
    println!("clean test: acc {:.3} f1 {:.3} auc {:.3} u {:.3}", rep.fused.accuracy, rep.fused.macro_f1, rep.fused.auc_ovr, rep.fused.mean_uncertainty);
    for (v, m) in rep.per_view.iter().enumerate() {
        println!("  view {v}: acc {:.3} u {:.3}", m.accuracy, m.mean_uncertainty);
    }
    for sigma in [1.0, 3.0, 10.0] {
        let conf = inject_conflict(&ds, &ConflictSpec { views: vec![3], mode: ConflictMode::Noise { sigma }, seed: 7 }).unwrap();
        let rep_c = evaluate(&out.model, &conf, Split::Test).unwrap();
        let outs = eval_outputs(&out.model, &conf, Split::Test).unwrap();
        let g = outs.fused.graph.as_ref().unwrap();
        println!("conflict sigma={sigma}: acc {:.3} u {:.3}", rep_c.fused.accuracy, rep_c.fused.mean_uncertainty);
        for i in 0..4 {
            let row: Vec<String> = (0..4).map(|j| format!("{:.3}", g.weights.get(i,j))).collect();
            println!("    {}", row.join(" "));
        }
        println!("    coeffs: {:?}", g.view_coefficients().iter().map(|c| format!("{:.3}", c)).collect::<Vec<_>>());
        // evidence magnitude diagnostics
        let mags: Vec<String> = outs.conditioned.iter().map(|e| format!("{:.1}", e.data().iter().sum::<f64>() / e.rows() as f64)).collect();
        let raw_mags: Vec<String> = outs.raw_evidence.iter().map(|e| format!("{:.1}", e.data().iter().sum::<f64>() / e.rows() as f64)).collect();
        let cons_mag = outs.consensus.data().iter().sum::<f64>() / outs.consensus.rows() as f64;
        println!("    mean row mass: raw e {:?}  tilde {:?}  cons {:.1}", raw_mags, mags, cons_mag);
    }
}
