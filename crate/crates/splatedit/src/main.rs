fn main() {
    println!("splatedit");
}
