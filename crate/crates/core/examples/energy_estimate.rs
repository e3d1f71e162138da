//! Compare spiking and dense energy for one input, layer by layer.

use spikesal::metrics::{estimate_energy, EnergyConstants};
use spikesal::rst::{ModelConfig, Rst};
use spikesal::simcam::{simulate, CameraParams, Scene, SceneObject, Shape};

fn main() -> anyhow::Result<()> {
    let mut scene = Scene::uniform(64, 64, 400, 0.1);
    scene.objects.push(SceneObject { shape: Shape::Disk { radius: 10.0 }, x: 32.0, y: 32.0, vx: 0.02, vy: 0.01, intensity: 0.9 });
    let stream = simulate(&scene, &CameraParams::default(), 0)?;
    let repr = stream.isi_repr(200, 255.0)?;

    let mut model = Rst::new(ModelConfig { dim: 32, heads: 4, steps: 5, rfa_blocks: 2, ..Default::default() }, 0)?;
    let report = estimate_energy(&mut model, &repr, &EnergyConstants::default())?;
    print!("{}", report.table());
    Ok(())
}
