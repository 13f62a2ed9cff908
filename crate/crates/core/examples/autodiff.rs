//! Reverse-mode differentiation on the tape, checked against central
//! differences.

use morphogen::numcore::{Tape, Tensor};

fn loss(w: &Tensor, x: &Tensor, gain: &Tensor, bias: &Tensor) -> morphogen::Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let wv = tape.param(w.clone());
    let h = tape.matmul(tape.constant(x.clone()), wv)?;
    let h = tape.layer_norm(h, tape.constant(gain.clone()), tape.constant(bias.clone()))?;
    let p = tape.softmax(tape.silu(h))?;
    let l = tape.sum(tape.mul(p, p)?);
    let g = tape.backward(l)?;
    Ok((tape.item(l), g.get(wv).unwrap().to_vec()))
}

fn main() -> morphogen::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.1, 0.4, -0.5]])?;
    let mut w = Tensor::from_rows(&[vec![0.2, -0.1, 0.4, 0.0], vec![0.5, 0.3, -0.2, 0.1], vec![-0.3, 0.6, 0.2, -0.4]])?;
    let (gain, bias) = (Tensor::full(&[4], 1.0), Tensor::zeros(&[4]));
    let (value, grad) = loss(&w, &x, &gain, &bias)?;
    println!("loss {value:.6}");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let x0 = w.data()[i];
        w.data_mut()[i] = x0 + h;
        let up = loss(&w, &x, &gain, &bias)?.0;
        w.data_mut()[i] = x0 - h;
        let down = loss(&w, &x, &gain, &bias)?.0;
        w.data_mut()[i] = x0;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs());
        println!("dL/dw[{i:>2}]  tape {:>+.8}  central {:>+.8}", grad[i], fd);
    }
    println!("max abs difference {worst:.2e}");
    Ok(())
}
