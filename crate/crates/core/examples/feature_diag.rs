//! Throwaway diagnostic: how far do adversarial examples move the flatten
//! features along the class-separation direction?
use rdfs_core::attacks::read_cache;
use rdfs_core::detectors::CnnDetector;
use rdfs_core::harness::{load_dataset, Split};
use rdfs_core::image::Label;
use std::path::Path;

fn main() {
    let out = std::env::args().nth(1).unwrap();
    let task = std::env::args().nth(2).unwrap();
    let det = CnnDetector::load(Path::new(&format!("{out}/{task}/models/cnn_bayar_style.rdm"))).unwrap();
    let ds = load_dataset(Path::new(&format!("{out}/{task}/dataset"))).unwrap();

    // class means of test features
    let n = det.n_features();
    let mut mu0 = vec![0.0f64; n];
    let mut mu1 = vec![0.0f64; n];
    let (mut c0, mut c1) = (0usize, 0usize);
    let test = ds.split(Split::Test);
    for p in test.iter() {
        let f = det.extract_features(&p.image).unwrap();
        match p.label {
            Label::Original => { for i in 0..n { mu0[i] += f[i] as f64; } c0 += 1; }
            Label::Manipulated => { for i in 0..n { mu1[i] += f[i] as f64; } c1 += 1; }
        }
    }
    for i in 0..n { mu0[i] /= c0 as f64; mu1[i] /= c1 as f64; }
    let dir: Vec<f64> = (0..n).map(|i| mu0[i] - mu1[i]).collect();
    let dnorm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("class-mean distance in feature space: {dnorm:.4}");

    // attacked patches: original vs adversarial features
    let h1: Vec<_> = test.iter().filter(|p| p.label == Label::Manipulated).map(|p| &p.image).collect();
    let probs = det.predict_batch(&h1).unwrap();
    let targets: Vec<_> = h1.iter().zip(probs).filter(|(_, (p0, p1))| p1 > p0).map(|(im, _)| *im).take(100).collect();

    // Reduced detectors at K=N: margin movement on the attacked subset.
    let rdd_dir = format!("{out}/{task}/rdfs/bayar_style");
    for kind in ["fc", "svm"] {
        let path = format!("{rdd_dir}/{kind}_k{n}_r0.rdd");
        if let Ok(red) = rdfs_core::rdfs::ReducedDetector::load(Path::new(&path)) {
            let mut clean_h1_acc = 0usize;
            let mut clean_scores = Vec::new();
            for img in &targets {
                let f = det.extract_features(img).unwrap();
                let d = red.predict(&f).unwrap();
                if d.label == Label::Manipulated { clean_h1_acc += 1; }
                clean_scores.push(d.score);
            }
            println!("{kind} K=N on UNATTACKED targets: acc {}/{} mean score {:.3}",
                clean_h1_acc, targets.len(),
                clean_scores.iter().sum::<f64>() / clean_scores.len() as f64);
            for attack in ["fgsm", "pgd", "bfgs"] {
                let cache = read_cache(Path::new(&format!("{out}/{task}/attacks/bayar_style")), attack).unwrap();
                let mut acc = 0usize; let mut cnt = 0usize; let mut score = 0.0;
                for e in &cache {
                    if let Ok(o) = &e.outcome { if o.success {
                        let f = det.features_model_batch(&o.adversarial).unwrap().remove(0);
                        let d = red.predict(&f).unwrap();
                        if d.label == Label::Manipulated { acc += 1; }
                        score += d.score; cnt += 1;
                    }}
                }
                println!("  {kind} K=N vs {attack}: acc {acc}/{cnt} mean score {:.3}", score / cnt as f64);
            }
        }
    }

    for attack in ["fgsm", "pgd", "bfgs"] {
        let cache = read_cache(Path::new(&format!("{out}/{task}/attacks/bayar_style")), attack).unwrap();
        let mut proj = 0.0f64;
        let mut shift = 0.0f64;
        let mut cnt = 0usize;
        for e in &cache {
            if let Ok(o) = &e.outcome {
                if !o.success { continue; }
                let f_orig = det.extract_features(targets[e.patch_index]).unwrap();
                let f_adv = det.features_model_batch(&o.adversarial).unwrap().remove(0);
                let delta: Vec<f64> = (0..n).map(|i| f_adv[i] as f64 - f_orig[i] as f64).collect();
                let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                let p = delta.iter().zip(dir.iter()).map(|(a, b)| a * b).sum::<f64>() / dnorm;
                proj += p; shift += dn; cnt += 1;
            }
        }
        println!("{attack}: n={cnt} mean |df|={:.4} mean proj onto (mu0-mu1)={:.4} (cluster dist {:.4})",
                 shift / cnt as f64, proj / cnt as f64, dnorm);
    }
}
