# Helper for ingest: writes the channel map a stack file needs to load under canonical names.
import argparse
from pathlib import Path

import yaml

from imc_io import CANONICAL_CHANNELS, StackError, read_pages


def generate_channel_mapping(file_names: list, num_pages: int) -> dict:
    """
    Maps page index -> channel name for every page of a stack file.

    File names are matched case-insensitively to the canonical channel set;
    unmatched pages keep the name the file gives them, or `page<N>` when the
    file carries none.
    """
    canonical = {name.lower(): name for name in CANONICAL_CHANNELS}
    mapping = {}
    for index in range(num_pages):
        name = file_names[index] if file_names is not None else f"page{index}"
        mapping[index] = canonical.get(name.strip().lower(), name)
    return mapping


def build_mapping(stack_path, output=None):
    pages, names = read_pages(Path(stack_path))
    mapping = generate_channel_mapping(names, len(pages))
    text = yaml.safe_dump(mapping, sort_keys=True)
    if output is not None:
        Path(output).write_text(text, encoding="utf-8")
    return mapping, text


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Generate a channel-map YAML for a multichannel TIFF.",
        epilog="Example usage: python create_mapping.py subject01.ome.tif --output channels.yaml",
    )
    parser.add_argument("stack", type=Path)
    parser.add_argument("--output", type=Path, default=None)
    args = parser.parse_args(argv)
    try:
        _, text = build_mapping(args.stack, args.output)
    except (OSError, StackError) as e:
        parser.exit(1, f"error: {e}\n")
    if args.output is None:
        print(text, end="")


if __name__ == "__main__":
    main()
