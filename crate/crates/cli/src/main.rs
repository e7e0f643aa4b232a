fn main() {
    println!("ufo");
}
