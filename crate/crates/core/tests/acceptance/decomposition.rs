use stvisit_core::diff::{DropoutStream, Tape};
use stvisit_core::model::{Batch, Model, StaticContext, Variant};
use stvisit_core::nn::Bound;
use stvisit_core::uncertainty::decompose;

use crate::support::{rel_close, serial, tiny_model, verdict};

fn mc_passes(
    model: &Model,
    ctx: &StaticContext,
    batch: &Batch,
    seed: u64,
    passes: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (0..passes)
        .map(|p| {
            let tape = Tape::new();
            let bp = Bound::new(&tape, &model.store, false);
            let o = model
                .forward(&bp, ctx, batch, DropoutStream::train(seed, 0, p as u64))
                .unwrap();
            (tape.value(o.mu).into_data(), tape.value(o.var).into_data())
        })
        .unzip()
}

#[test]
fn criterion_05_variance_decomposition() {
    let _serial = serial();
    let mut identity_breaks = 0usize;
    let mut mixture_ok = true;
    let mut spread_seen = true;
    for run in 0..20u64 {
        let tiny = tiny_model(Variant::Full, 40 + run, 0.3, 1);
        let (mus, vars) = mc_passes(
            &tiny.model,
            &tiny.ctx,
            &tiny.batch,
            run,
            3 + (run as usize % 5),
        );
        let dec = decompose(&mus, &vars).unwrap();
        identity_breaks += (0..dec.total.len())
            .filter(|&i| dec.total[i].to_bits() != (dec.aleatoric[i] + dec.epistemic[i]).to_bits())
            .count();
        // law of total variance: E[σ²] + E[μ²] - E[μ]²
        let m = mus.len() as f64;
        for i in 0..dec.total.len() {
            let e_mu = mus.iter().map(|p| p[i]).sum::<f64>() / m;
            let e_mu2 = mus.iter().map(|p| p[i] * p[i]).sum::<f64>() / m;
            let e_var = vars.iter().map(|p| p[i]).sum::<f64>() / m;
            mixture_ok &= rel_close(dec.total[i], e_var + e_mu2 - e_mu * e_mu, 1e-10);
        }
        spread_seen &= dec.epistemic.iter().any(|&e| e > 0.0);
    }

    let still = tiny_model(Variant::Full, 7, 0.0, 1);
    let forecast = still
        .model
        .predict(&still.ctx, &still.batch, 10, 3)
        .unwrap();
    let zero_dropout = forecast.epistemic.iter().all(|&e| e == 0.0);

    let pass = identity_breaks == 0 && mixture_ok && spread_seen && zero_dropout;
    verdict(
        5,
        "variance decomposition identity",
        pass,
        &format!(
            "bitwise total != aleatoric + epistemic in {} entries over 20 MC runs; mixture variance agrees: {}; dropout 0 gives zero epistemic: {}",
            identity_breaks, mixture_ok, zero_dropout
        ),
    );
    assert!(pass);
}
