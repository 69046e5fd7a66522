import os
import shutil
import argparse

RESULTS_DIR = 'results'


def clear_folder(path: str, label: str = None) -> int:
    """
    Delete all contents of the specified folder, keeping the folder itself.

    Args:
        path (str): Path to the folder to clear.
        label (str, optional): Optional label to display after clearing.

    Returns:
        int: Number of entries removed.
    """
    if not os.path.isdir(path):
        return 0
    removed = 0
    for entry in os.listdir(path):
        full_path = os.path.join(path, entry)
        if os.path.isdir(full_path) and not os.path.islink(full_path):
            shutil.rmtree(full_path)
        else:
            os.remove(full_path)
        removed += 1
    if label:
        print(f"✔ Cleared: {label} ({removed} entries)")
    return removed


def clear_results(root: str = '.') -> int:
    """
    Delete trajectories, orbit samples, reports and plots written under 'results/'.
    """
    path = os.path.join(root, RESULTS_DIR)
    if not os.path.exists(path):
        print("⚠ No 'results/' directory found.")
        return 0
    return clear_folder(path, 'results')


def clear_pycache(root: str = '.') -> int:
    """
    Recursively delete Python cache files: __pycache__, .pytest_cache, .pyc and .pyo files.
    """
    removed = 0
    for current, dirs, files in os.walk(root):
        for dir_name in list(dirs):
            if dir_name in ('__pycache__', '.pytest_cache'):
                shutil.rmtree(os.path.join(current, dir_name))
                dirs.remove(dir_name)
                removed += 1
        for file in files:
            if file.endswith(('.pyc', '.pyo')):
                try:
                    os.remove(os.path.join(current, file))
                    removed += 1
                except OSError:
                    pass
    print("✔ Cleared: Python cache files (__pycache__, .pytest_cache, .pyc, .pyo)")
    return removed


def main(argv: list = None) -> None:
    """
    Command-line interface for clearing generated files.

    Command-line Arguments:
        --force         (bool): Clear everything without confirmation.
        --results-only  (bool): Clear only the results folder.
        --cache-only    (bool): Clear only Python cache files.
    """
    parser = argparse.ArgumentParser(description='Clear generated results and caches.')
    parser.add_argument('--force', action='store_true', help='Clear everything without confirmation prompt')
    parser.add_argument('--results-only', action='store_true', help='Clear only the results folder')
    parser.add_argument('--cache-only', action='store_true', help='Clear only Python caches')
    args = parser.parse_args(argv)

    clear_all = args.force or not (args.results_only or args.cache_only)

    if not args.force and clear_all:
        confirm = input("Are you sure you want to clear ALL generated files? (y/n): ").strip().lower()
        if confirm not in ['y', 'yes', '']:
            print("❌ Operation cancelled.")
            return

    if args.results_only or clear_all:
        clear_results()

    if args.cache_only or clear_all:
        clear_pycache()

    print("\n✅ Done.")


if __name__ == "__main__":
    main()
