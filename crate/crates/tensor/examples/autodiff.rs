//! Fits a two-layer network to XOR with the tape and Adam.

use ldca_tensor::{Adam, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ldca_tensor::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]]);
    let labels = [0, 1, 1, 0];
    let mut params = [
        Tensor::randn(&[2, 8], 1.0, &mut rng),
        Tensor::zeros(&[8]),
        Tensor::randn(&[8, 2], 1.0, &mut rng),
        Tensor::zeros(&[2]),
    ];
    let mut adam = Adam::new(0.05);
    for step in 0..300 {
        let mut tape = Tape::new();
        let v: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let input = tape.constant(x.clone());
        let h = tape.matmul(input, v[0])?;
        let h = tape.add_row(h, v[1])?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, v[2])?;
        let logits = tape.add_row(o, v[3])?;
        let loss = tape.cross_entropy(logits, &labels)?;
        if step % 50 == 0 {
            println!("step {step:3} loss {:.5}", tape.value(loss).item()?);
        }
        tape.backward(loss)?;
        let grads: Vec<_> = v.iter().map(|&p| tape.grad(p).cloned()).collect();
        let refs: Vec<_> = grads.iter().map(Option::as_ref).collect();
        adam.step(&mut params.iter_mut().collect::<Vec<_>>(), &refs)?;
    }
    Ok(())
}
