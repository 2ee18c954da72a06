mod commands;
mod runfile;

fn main() {
    std::process::exit(commands::run());
}
