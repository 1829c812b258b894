import sys

from dotenv import load_dotenv

from falign.cli import main

load_dotenv()


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
