"""CLI subcommand handlers; each module exposes register() and handle_command()."""
