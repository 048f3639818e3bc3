fn main() {
    println!("gazenlq");
}
