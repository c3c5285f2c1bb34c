//! The tape-based autodiff engine on its own: build a small expression,
//! backpropagate, and compare against a central finite difference.

use corrnet3d::{Graph, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> corrnet3d::Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let w = g.variable(w.clone());
    let h = g.matmul(x, w)?;
    let h = g.leaky_relu(h, 0.2);
    let p = g.row_softmax(h)?;
    let l = g.frobenius_sq(p);
    g.backward(l)?;
    Ok((g.value(l).item(), g.grad(w).expect("leaf").to_vec()))
}

fn main() -> corrnet3d::Result<()> {
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]])?;
    let w = Tensor::from_rows(&[vec![0.1, 0.2, -0.3], vec![0.4, -0.5, 0.6], vec![-0.7, 0.8, 0.9]])?;
    let (value, grad) = loss(&x, &w)?;
    println!("loss = {value:.6}");

    let h = 1e-6;
    for (i, analytic) in grad.iter().enumerate() {
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (loss(&x, &plus)?.0 - loss(&x, &minus)?.0) / (2.0 * h);
        println!("dL/dw[{}] analytic {analytic:+.8}  numeric {numeric:+.8}", i);
    }
    Ok(())
}
