use lipvox::model::Model;
use lipvox::nn::ParamStore;
use lipvox::rng::{rng_from, uniform_arr};
use lipvox::tensor::{backward, Tensor};
use std::time::Instant;

fn main() {
    let mut store = ParamStore::new();
    let mut rng = rng_from(1);
    let model = Model::new(&mut store, 4, &mut rng);

    let x = Tensor::constant(uniform_arr(&[4, 25, 96, 96, 3], 0.0, 1.0, &mut rng));
    let t0 = Instant::now();
    let f = model.visual.forward(&x).unwrap();
    println!("visual fwd B4 T25: {:?}", t0.elapsed());

    let params = model.generator_params(&store);
    let snap: Vec<_> = params.iter().map(|p| p.tensor()).collect();
    let t0 = Instant::now();
    let f2 = model.visual.forward(&x).unwrap();
    let loss = f2.square().sum_all();
    let refs: Vec<&Tensor> = snap.iter().collect();
    let _g = backward(&loss, &refs, false);
    println!("visual fwd+bwd B4 T25: {:?}", t0.elapsed());

    let mel = Tensor::constant(uniform_arr(&[4, 100, 80], 0.0, 1.0, &mut rng));
    let t0 = Instant::now();
    let c = model.surrogates.content.features(&mel);
    println!("content fwd B4: {:?}  shape {:?}", t0.elapsed(), c.shape());

    let t0 = Instant::now();
    let d = model.proj_content.forward(&c);
    println!("proj_content fwd B4: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let v = Tensor::constant(uniform_arr(&[4, 256], -0.1, 0.1, &mut rng));
    let z = lipvox::model::reparam_sample(&d, &mut rng);
    let y = model.decoder.forward(&z, &v).unwrap();
    println!("decoder fwd B4: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let s = model.critic.forward(&y).unwrap();
    println!("critic fwd B4: {:?}", t0.elapsed());

    // critic step pattern: forward + gp double-backward wrt params
    let cparams = model.critic_params(&store);
    let csnap: Vec<_> = cparams.iter().map(|p| p.tensor()).collect();
    let t0 = Instant::now();
    let xh = Tensor::leaf(uniform_arr(&[4, 100, 80], 0.0, 1.0, &mut rng));
    let sc = model.critic.forward(&xh).unwrap().sum_all();
    let gx = backward(&sc, &[&xh], true).get_or_zeros(&xh);
    let gp = gx.square().sum_axis(1).sum_axis(1).sqrt().add_scalar(-1.0).square().mean_all();
    let total = s.mean_all().add(&gp.scale(10.0));
    let crefs: Vec<&Tensor> = csnap.iter().collect();
    let _g = backward(&total, &crefs, false);
    println!("critic fwd+gp double-bwd B4: {:?}", t0.elapsed());
    let _ = f;
}
