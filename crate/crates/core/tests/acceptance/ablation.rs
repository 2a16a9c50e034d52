use stvisit_core::model::Variant;

use crate::support::{benchmark, serial, verdict, BENCHMARK_SEEDS};

#[test]
fn criterion_08_ablation_ordering() {
    let _serial = serial();
    let mut wins = [0usize; 2];
    let mut rows = Vec::new();
    for &seed in &BENCHMARK_SEEDS {
        let full = benchmark(seed, Variant::Full).mae;
        let ablated = [Variant::WoGmamba, Variant::WoStce].map(|v| benchmark(seed, v).mae);
        for (w, mae) in wins.iter_mut().zip(ablated) {
            *w += usize::from(mae > full);
        }
        rows.push(format!(
            "seed {} full {:.3} wo-gmamba {:.3} wo-stce {:.3}",
            seed, full, ablated[0], ablated[1]
        ));
    }
    let n = BENCHMARK_SEEDS.len();
    let pass = wins.iter().all(|&w| w == n);
    verdict(
        8,
        "ablation ordering",
        pass,
        &format!(
            "wo-gmamba worse in {}/{}, wo-stce worse in {}/{} (need {}/{} each); test MAE [{}]",
            wins[0],
            n,
            wins[1],
            n,
            n,
            n,
            rows.join("; ")
        ),
    );
    assert!(pass);
}
