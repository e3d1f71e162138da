//! Run a model over a simulated stream, window by window and continuously.
//!
//! The model is untrained; the point is the calling pattern.

use spikesal::data::stream_windows;
use spikesal::neuro::NeuronState;
use spikesal::rst::{Mode, ModelConfig, Rst};
use spikesal::simcam::{simulate, CameraParams, Scene, SceneObject, Shape};

fn main() -> anyhow::Result<()> {
    let mut scene = Scene::uniform(32, 32, 1000, 0.15);
    scene.objects.push(SceneObject { shape: Shape::Disk { radius: 6.0 }, x: 10.0, y: 16.0, vx: 0.01, vy: 0.0, intensity: 0.8 });
    let stream = simulate(&scene, &CameraParams::default(), 1)?;
    let windows = stream_windows(&stream, 200, 255.0)?;

    let mut model = Rst::new(ModelConfig { dim: 16, heads: 2, steps: 3, rfa_blocks: 1, ..Default::default() }, 0)?;
    let mut carried = NeuronState::new();
    for (i, r) in windows.iter().enumerate() {
        let multi = model.predict(&[r], Mode::MultiStep, &mut NeuronState::new(), None)?;
        let single = model.predict(&[r], Mode::SingleStep, &mut carried, None)?;
        let last = multi.last().expect("one map per step");
        println!("window {i}: multi-step mean {:.4}, continuous mean {:.4}", last.mean(), single[0].mean());
    }
    Ok(())
}
