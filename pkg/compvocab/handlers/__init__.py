from compvocab.handlers import detect, extract, inspect, learn, render, synth


def get_all_commands() -> list:
    """Order matters: it is the order subcommands are listed in --help."""
    return [
        synth,
        extract,
        learn,      # learn-generic, learn-layer, learn-class, thresholds
        detect,     # detect, evaluate, classify-features
        inspect,
        render,
    ]
