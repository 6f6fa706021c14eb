import sys

from maseya.measure.pipeline import main

if __name__ == "__main__":
    sys.exit(main())
