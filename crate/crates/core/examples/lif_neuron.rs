//! A single LIF layer driven by constant currents.
//!
//! Stronger input fires more often; every output is exactly 0 or 1.

use spikesal::grad::Tensor;
use spikesal::neuro::{lif_step, LifParams, LifState};

fn main() -> anyhow::Result<()> {
    let currents = [0.5, 1.0, 1.5, 2.0, 3.0];
    let x = Tensor::new(&[currents.len()], currents.to_vec())?;
    let mut state = LifState::new(LifParams::default(), &[currents.len()])?;
    let mut counts = vec![0usize; currents.len()];
    let mut raster = vec![String::new(); currents.len()];
    for _ in 0..40 {
        let s = lif_step(&mut state, &x)?;
        assert!(s.is_binary());
        for (i, &v) in s.data().iter().enumerate() {
            counts[i] += v as usize;
            raster[i].push(if v > 0.0 { '|' } else { '.' });
        }
    }
    for ((c, n), r) in currents.iter().zip(&counts).zip(&raster) {
        println!("I = {c:>3.1}  spikes {n:>2}  {r}");
    }
    Ok(())
}
