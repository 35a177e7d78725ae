fn main() {
    println!("mvseg: placeholder");
}
