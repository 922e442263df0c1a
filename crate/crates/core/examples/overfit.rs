use std::time::Instant;

use acenet_core::data::synth_phantom;
use acenet_core::eval::{mask_overlap, mean_foreground_dice, segment_volume};
use acenet_core::train::{run_training, TrainConfig, TrainObserver};
use acenet_core::{build_model, AcenetConfig};

struct Log(Instant);

impl TrainObserver for Log {
    fn on_epoch(&mut self, epoch: usize, mean_loss: f64, val: Option<f64>) {
        eprintln!("epoch {epoch:3} loss {mean_loss:.5} val {val:?} t={:.1}s", self.0.elapsed().as_secs_f64());
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(0.01);
    let batch: usize = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(6);
    let ncases: u64 = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(4);
    let cases: Vec<_> = (0..ncases).map(|i| synth_phantom(100 + i, [32, 32, 32], 4, 0.01).unwrap()).collect();
    let cfg = AcenetConfig { s: 1, num_structures: 5, filters: 16, input_size: 32, ..AcenetConfig::default() };
    let mut model = build_model(&cfg, 7).unwrap();
    let tc = TrainConfig { epochs, base_lr: lr, batch_size: batch, seed: 3, ..TrainConfig::default() };
    let t = Instant::now();
    run_training(&mut model, &cases, None, &tc, &mut Log(t)).unwrap();
    let mut fg = 0.0;
    let mut sk = 0.0;
    for c in &cases {
        let seg = segment_volume(&model, &c.intensity).unwrap();
        fg += mean_foreground_dice(&seg.labels, &c.labels, 5).unwrap();
        let pm: Vec<bool> = seg.brain_mask.data().iter().map(|&v| v != 0.0).collect();
        let tm: Vec<bool> = c.brain_mask.data().iter().map(|&v| v != 0.0).collect();
        sk += mask_overlap(&pm, &tm).unwrap().dice;
    }
    println!("dice {:.4} skull {:.4} time {:.1}s", fg / ncases as f64, sk / ncases as f64, t.elapsed().as_secs_f64());
}
