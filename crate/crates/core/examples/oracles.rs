//! The ground truths used by the tests: Gaussian posterior given a mixture,
//! brute-force quadrature for a bimodal prior, and the closed-form flow.

use msdm_lab::numkit::Mat;
use msdm_lab::oracles::{gaussian_flow_closed_form, gaussian_posterior_given_mixture, grid_posterior, GridSpec};
use msdm_lab::scores::{GaussianPrior, GmmPrior};
use msdm_lab::SourceArray;

fn main() -> msdm_lab::Result<()> {
    let cov = Mat::from_rows(&[&[1.0, 0.9], &[0.9, 1.0]]);
    let prior = GaussianPrior::new(2, 1, vec![0.0, 0.0], cov)?;
    let post = gaussian_posterior_given_mixture(&prior, &[1.0])?;
    println!("correlated pair, y = 1: mean {:?}, variances {:?}", post.mean, post.variances());
    let grid = grid_posterior(&|x: &SourceArray| prior.log_density(x.as_slice(), 0.0), 2, &[1.0], GridSpec::default())?;
    println!("quadrature:             mean {:?}", grid.mean.as_slice());

    let comp = |m: f64| GaussianPrior::new(2, 1, vec![m, -m], Mat::identity(2).scale(0.25));
    let gmm = GmmPrior::new(vec![0.5, 0.5], vec![comp(1.5)?, comp(-1.5)?])?;
    let grid = grid_posterior(&|x: &SourceArray| gmm.log_density(x.as_slice(), 0.0), 2, &[1.0], GridSpec::default())?;
    println!("bimodal pair, y = 1: mean {:?}, variance {:?}", grid.mean.as_slice(), grid.variance.as_slice());

    for t in [1.0, 0.5, 0.0] {
        println!("flow from x_T = 1 at T = 1 to t = {t}: {:.6}", gaussian_flow_closed_form(1.0, 1.0, t, 1.0));
    }
    Ok(())
}
