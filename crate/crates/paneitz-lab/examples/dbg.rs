use paneitz_lab::axisym::*;
use paneitz_lab::sphere::Dim;

fn main() {
    let dim = Dim::new(5).unwrap();
    for m in [128usize, 256, 400] {
        let grid = AxisymGrid::new(dim, m).unwrap();
        let u = AxisymField::from_fn(&grid, |_| 1.0).unwrap();
        let lap = laplacian_axisym(&u);
        let pu = paneitz_apply(&u);
        let mut worst = 0.0f64;
        for v in pu.values.iter() { worst = worst.max((v - 105.0/16.0).abs()); }
        println!("M={m}: sup lap(1) = {:e}, sup |P(1)-d_n| = {:e}", lap.sup_norm(), worst);
    }
}
