from weighted_ips.cli import main
import sys

sys.exit(main())
