from mbnn.cli import main

raise SystemExit(main())
