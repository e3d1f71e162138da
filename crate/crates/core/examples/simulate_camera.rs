//! Integrate-and-fire camera simulation.
//!
//! A uniform scene checks the firing-rate law; a scene with one moving disc
//! shows the object standing out in the spike-count image.

use spikesal::simcam::{firing_rate_oracle, simulate, CameraParams, Scene, SceneObject, Shape};

fn main() -> anyhow::Result<()> {
    let cam = CameraParams::default();
    for intensity in [0.05, 0.2, 0.37, 0.8] {
        let stream = simulate(&Scene::uniform(4, 4, 400, intensity), &cam, 0)?;
        let fired = (0..stream.frames()).filter(|&f| stream.bit(f, 5)).count();
        println!("I = {intensity:.2}: {fired} spikes, expected {}", firing_rate_oracle(intensity, cam.threshold, 400));
    }

    let mut scene = Scene::uniform(32, 16, 200, 0.1);
    scene.objects.push(SceneObject { shape: Shape::Disk { radius: 4.0 }, x: 8.0, y: 8.0, vx: 0.05, vy: 0.0, intensity: 0.9 });
    let stream = simulate(&scene, &cam, 0)?;
    let counts = stream.spike_count_repr(200, 255.0)?;
    println!("\nspike counts over 200 frames:");
    for row in counts.values.chunks(counts.width) {
        let line: String = row.iter().map(|&v| if v > 128.0 { '#' } else if v > 20.0 { '+' } else { '.' }).collect();
        println!("  {line}");
    }
    Ok(())
}
