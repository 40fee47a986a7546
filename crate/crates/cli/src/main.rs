fn main() {
    // Command surface lands once the core library is in place.
}
