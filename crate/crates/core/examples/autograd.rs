//! Records a small two-layer network on the tape, runs backward, and compares
//! one gradient entry with a central difference.

use tinylora::tensor::{Tape, Tensor};

fn loss_of(x: &Tensor, w1: &Tensor, w2: &Tensor) -> f32 {
    let tape = Tape::new();
    let h = tape.constant(x).matmul(tape.constant(w1)).unwrap().silu();
    h.matmul(tape.constant(w2)).unwrap().cross_entropy(&[1, 0], &[1, 1]).unwrap().item()
}

fn main() -> tinylora::Result<()> {
    let x = Tensor::new([2, 3], vec![0.5, -1.0, 0.25, 1.5, 0.75, -0.5])?;
    let w1 = Tensor::new([3, 4], (0..12).map(|i| (i as f32 * 0.37).sin()).collect())?.with_requires_grad(true);
    let w2 = Tensor::new([4, 2], (0..8).map(|i| (i as f32 * 0.91).cos()).collect())?.with_requires_grad(true);

    let tape = Tape::new();
    let (a, b) = (tape.leaf("w1", &w1), tape.leaf("w2", &w2));
    let logits = tape.constant(&x).matmul(a)?.silu().matmul(b)?;
    let loss = logits.cross_entropy(&[1, 0], &[1, 1])?;
    println!("loss {:.6} across {} recorded nodes", loss.item(), tape.len());
    let grads = tape.backward(loss)?;

    let eps = 1e-3;
    let (mut up, mut down) = (w1.clone(), w1.clone());
    up.data_mut()[5] += eps;
    down.data_mut()[5] -= eps;
    let numeric = (loss_of(&x, &up, &w2) - loss_of(&x, &down, &w2)) / (2.0 * eps);
    println!("d loss / d w1[1,1]: tape {:.6}, finite difference {numeric:.6}", grads.get("w1").unwrap()[5]);
    println!("d loss / d w2 = {:?}", grads.get("w2").unwrap());
    Ok(())
}
