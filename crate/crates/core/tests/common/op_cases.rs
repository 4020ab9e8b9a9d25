use uniseg::{Graph, Tensor, Var};

use super::{project, random, random_away_from_zero};

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

/// One differentiable operator wired into a scalar loss.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn case(name: impl Into<String>, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name: name.into(),
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable operator of the tape, each on small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = Vec::new();
    for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([2, 2, 2], [1, 1, 1]), ([1, 2, 2], [0, 1, 1])] {
        cases.push(case(
            format!("conv3d stride {stride:?}"),
            vec![random(&[2, 5, 5, 5], 1), random(&[3, 2, 3, 3, 3], 2), random(&[3], 3)],
            move |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                project(g, y, 4)
            },
        ));
    }
    cases.push(case(
        "conv_transpose3d",
        vec![random(&[3, 2, 3, 3], 5), random(&[3, 2, 2, 2, 2], 6), random(&[2], 7)],
        |g, v| {
            let y = g.conv_transpose3d(v[0], v[1], Some(v[2]), [2, 2, 2]).unwrap();
            project(g, y, 8)
        },
    ));
    cases.push(case(
        "instance_norm",
        vec![random(&[2, 3, 4, 4], 9), random(&[2], 10), random(&[2], 11)],
        |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5).unwrap();
            project(g, y, 12)
        },
    ));
    cases.push(case("leaky_relu", vec![random_away_from_zero(&[2, 3, 3, 3], 13, 1e-3)], |g, v| {
        let y = g.leaky_relu(v[0], 0.01);
        project(g, y, 14)
    }));
    cases.push(case(
        "concat/split",
        vec![random(&[3, 2, 2, 2], 15), random(&[5, 2, 2, 2], 16)],
        |g, v| {
            let c = g.concat_channels(&[v[0], v[1]]).unwrap();
            let parts = g.split_channels(c, &[4, 4]).unwrap();
            let s0 = project(g, parts[0], 17);
            let s1 = project(g, parts[1], 18);
            g.add(s0, s1).unwrap()
        },
    ));
    cases.push(case("softmax", vec![random(&[4, 2, 3, 3], 19)], |g, v| {
        let y = g.softmax_channel(v[0]).unwrap();
        project(g, y, 20)
    }));
    cases.push(case("narrow", vec![random(&[5, 2, 2, 2], 30)], |g, v| {
        let y = g.narrow_channels(v[0], 1, 3).unwrap();
        project(g, y, 31)
    }));
    cases.push(case("mul/add", vec![random(&[2, 2, 2, 2], 32), random(&[2, 2, 2, 2], 33)], |g, v| {
        let m = g.mul(v[0], v[1]).unwrap();
        let a = g.add(m, v[0]).unwrap();
        project(g, a, 34)
    }));
    cases.push(case(
        "mean_spatial/upsample/reshape/slice_flat/square/scale",
        vec![random(&[3, 2, 2, 2], 21)],
        |g, v| {
            let m = g.mean_spatial(v[0]).unwrap();
            let up = g.upsample_nearest(v[0], [1, 2, 2]).unwrap();
            let flat = g.reshape(m, &[3]).unwrap();
            let piece = g.slice_flat(v[0], 5, &[2, 3]).unwrap();
            let sq = g.square(piece);
            let s = g.scale(flat, 0.7);
            let parts = [project(g, up, 22), project(g, s, 23), project(g, sq, 24)];
            let t = g.add(parts[0], parts[1]).unwrap();
            g.add(t, parts[2]).unwrap()
        },
    ));
    let labels: Vec<u8> = (0..18).map(|i| (i * 7 % 3) as u8).collect();
    cases.push(case("cross_entropy + soft_dice", vec![random(&[3, 2, 3, 3], 25)], move |g, v| {
        let ce = g.cross_entropy(v[0], &labels).unwrap();
        let p = g.softmax_channel(v[0]).unwrap();
        let dice = g.soft_dice_loss(p, &labels, 1e-5).unwrap();
        g.add(ce, dice).unwrap()
    }));
    cases.push(case(
        "conv3d -> leaky_relu -> squared sum",
        vec![random(&[2, 4, 4, 4], 26), random(&[2, 2, 3, 3, 3], 27), random(&[2], 28)],
        |g, v| {
            let c = g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1]).unwrap();
            let a = g.leaky_relu(c, 0.01);
            let s = g.sum(a);
            g.square(s)
        },
    ));
    cases
}
