fn main() {
    println!("facexfer");
}
