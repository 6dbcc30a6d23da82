//! Fixed-time vs random-phase ATT across demand levels on a 2x2 grid.
use numcore::SeededRng;
use trafficsim::{average_travel_time, FlowSpec, NetworkSpec, Phase, Simulator};

fn main() {
    let net = NetworkSpec::grid(2, 2);
    for vph in [150.0, 250.0, 350.0, 450.0, 550.0, 700.0] {
        let flows = FlowSpec::uniform(&net, vph, 3600);
        let mut out = Vec::new();
        for policy in ["fixed", "random", "greedy"] {
            let mut sim = Simulator::new(net.clone(), flows.clone(), 1).unwrap();
            let mut rng = SeededRng::new(9);
            let mut acts = vec![Phase::A; 4];
            while !sim.is_finished() {
                if sim.time().is_multiple_of(15) {
                    for (i, a) in acts.iter_mut().enumerate() {
                        *a = match policy {
                            "fixed" => Phase::ALL[(sim.time() / 15 % 4) as usize],
                            "random" => Phase::ALL[rng.below(4)],
                            _ => {
                                let o = sim.observe(i);
                                *Phase::ALL
                                    .iter()
                                    .max_by(|p, q| {
                                        let s = |x: &Phase| x.movements().iter().map(|&m| o.queue(m)).sum::<f32>();
                                        s(p).partial_cmp(&s(q)).unwrap().then(q.index().cmp(&p.index()))
                                    })
                                    .unwrap()
                            }
                        };
                    }
                }
                sim.step(&acts).unwrap();
            }
            out.push(average_travel_time(sim.records(), Some(sim.time())).unwrap());
        }
        println!("vph {vph}: fixed {:.1} random {:.1} greedy {:.1}", out[0], out[1], out[2]);
    }
}
