//! Score a few hand-made saliency maps against one mask.

use spikesal::metrics::Evaluator;

fn main() -> anyhow::Result<()> {
    let (w, h) = (16, 16);
    let gt: Vec<u8> = (0..w * h).map(|i| if (4..12).contains(&(i % w)) && (4..12).contains(&(i / w)) { 1 } else { 0 }).collect();
    let perfect: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
    let blurred: Vec<f64> = perfect.iter().map(|&p| 0.2 + 0.6 * p).collect();
    let shifted: Vec<f64> = (0..w * h).map(|i| perfect[(i + 3) % (w * h)]).collect();
    let flat = vec![0.5; w * h];

    for (name, s) in [("perfect", &perfect), ("blurred", &blurred), ("shifted", &shifted), ("flat", &flat)] {
        let mut ev = Evaluator::new();
        ev.add(name, s, &gt, w, h)?;
        let r = ev.finish()?.overall;
        println!("{name:<8} MAE {:.3}  maxF {:.3}  meanF {:.3}  S {:.3}", r.mae, r.f_beta_max, r.mean_f_beta, r.s_measure);
    }
    Ok(())
}
