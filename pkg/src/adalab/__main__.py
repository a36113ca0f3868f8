from adalab.cli import main

raise SystemExit(main())
