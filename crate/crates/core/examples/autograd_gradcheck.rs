//! A two-layer MLP on the tape, its backward pass, and a central-difference
//! check of every parameter gradient in f64.

use multivisit::autograd::{grad_check, GradCheckOptions, Params, Tape, Tensor, Var};

fn mlp_loss<'a>(t: &mut Tape<'a, f64>, p: &'a Params<f64>, x: &[f64]) -> multivisit::Result<Var> {
    let input = t.input(Tensor::from_slice(x));
    let mut layer = |name: &str| {
        let id = p.id(name).expect("registered in main");
        t.param(id, p.get(id))
    };
    let (w1, b1, w2) = (layer("w1"), layer("b1"), layer("w2"));
    let h = t.linear(input, w1, Some(b1))?;
    let h = t.relu(h)?;
    let logits = t.linear(h, w2, None)?;
    t.log_softmax_nll(logits, 1)
}

fn main() -> multivisit::Result<()> {
    let mut params = Params::<f64>::new();
    params.insert("w1", Tensor::from_f64([4, 3], &[0.3, -0.2, 0.5, 0.1, 0.4, -0.6, -0.3, 0.2, 0.7, 0.05, -0.1, 0.25])?)?;
    params.insert("b1", Tensor::from_f64([4], &[0.1, -0.05, 0.0, 0.2])?)?;
    params.insert("w2", Tensor::from_f64([2, 4], &[0.5, -0.4, 0.3, 0.2, -0.1, 0.6, -0.2, 0.4])?)?;
    let x = [1.0, -0.5, 2.0];

    let mut tape = Tape::new();
    let loss = mlp_loss(&mut tape, &params, &x)?;
    let mut grads = params.zeros_like();
    tape.backward_into(loss, &mut grads)?;
    println!("loss {:.6}", tape.value(loss).item());
    for name in ["w1", "b1", "w2"] {
        println!("d loss / d {name} = {:?}", grads.by_name(name).expect("same layout").data());
    }

    let report = grad_check(&params, GradCheckOptions::default(), |t, p| mlp_loss(t, p, &x))?;
    println!(
        "grad check over {} components: max relative error {:.2e}",
        report.components, report.max_rel_error
    );
    Ok(())
}
