use delay_ocp::oracle::collocate_delayed_lq;
use delay_ocp::problems::LqParams;

fn main() {
    let params = LqParams { state_gain: 1.0, delayed_state_gain: 0.0, ..LqParams::default() };
    for n in [200, 400, 800] {
        let sol = collocate_delayed_lq(&params, 0.0, 0.0, n).unwrap();
        // adjoint relation u = p/2 interior; look at u near ends vs interior
        println!("n={n}: u(0)={:.6} u(h)={:.6} u(0.5)={:.6} u(tf-h)={:.6} u(tf)={:.6}",
            sol.controls[0], sol.controls[1], sol.control_at(0.5), sol.controls[n-1], sol.controls[n]);
    }
}
