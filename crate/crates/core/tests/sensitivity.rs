use stackroute_core::market::{synth_market, AttributeRanges};
use stackroute_core::sensitivity::{parameter_value, with_parameter};
use stackroute_core::{
    equilibrium_jacobian, solve_equilibrium, solve_equilibrium_with, Error, FlowMatrix, Market, Parameter,
    SolverOptions,
};

fn tight(market: &Market) -> FlowMatrix {
    let opts = SolverOptions {
        tolerance: 1e-13,
        ..Default::default()
    };
    solve_equilibrium_with(market, &opts, None).unwrap().flow
}

fn parameters(market: &Market) -> Vec<Parameter> {
    let (n, m) = (market.n_users(), market.n_providers());
    let mut ps = vec![Parameter::Wq, Parameter::Wd];
    for j in 0..m {
        ps.extend([Parameter::Bias(j), Parameter::Price(j), Parameter::LogCapacity(j)]);
    }
    for i in 0..n {
        for j in 0..m {
            ps.push(Parameter::Delay(i, j));
        }
    }
    ps
}

#[test]
fn implicit_partials_match_central_differences() {
    let mut checked = 0;
    for seed in 0.. {
        if checked == 20 {
            break;
        }
        let market = synth_market(seed, 3, 4, &AttributeRanges::default()).unwrap();
        let r = solve_equilibrium(&market).unwrap();
        match equilibrium_jacobian(&r, &market, Parameter::Wq) {
            Err(Error::BoundaryPoint { .. }) => continue,
            other => {
                other.unwrap();
            }
        }
        for p in parameters(&market) {
            let jac = equilibrium_jacobian(&r, &market, p).unwrap();
            let x = parameter_value(&market, p);
            let h = 1e-5 * x.abs().max(1.0);
            let up = tight(&with_parameter(&market, p, x + h).unwrap());
            let down = tight(&with_parameter(&market, p, x - h).unwrap());
            for i in 0..market.n_users() {
                for j in 0..market.n_providers() {
                    let fd = (up.get(i, j) - down.get(i, j)) / (2.0 * h);
                    let an = jac.d_flow.get(i, j);
                    let tol = (1e-4 * fd.abs()).max(1e-7);
                    assert!((fd - an).abs() <= tol, "seed {seed} {p:?} ({i},{j}): fd {fd} vs {an}");
                }
            }
        }
        checked += 1;
    }
}
