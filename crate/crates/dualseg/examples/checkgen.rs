use dualseg::phantom::{generate_phantom, PhantomConfig};
fn main() {
    let (v1, m1, _) = generate_phantom(&PhantomConfig::desk(), 5).unwrap();
    let (v2, m2, _) = generate_phantom(&PhantomConfig::desk_hard(), 5).unwrap();
    let s1: f64 = v1.grid().data().iter().map(|&x| x as f64).sum();
    let s2: f64 = v2.grid().data().iter().map(|&x| x as f64).sum();
    println!("desk sum {s1:.1} fg {}, hard sum {s2:.1} fg {}", m1.foreground_count(), m2.foreground_count());
    // contrast stats for hard
    let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0, 0);
    for (&x, &m) in v2.grid().data().iter().zip(m2.grid().data()) {
        if m == 1 { fg += x as f64; nf += 1 } else { bg += x as f64; nb += 1 }
    }
    println!("hard: fg mean {:.3}, bg mean {:.3}", fg / nf as f64, bg / nb as f64);
}
