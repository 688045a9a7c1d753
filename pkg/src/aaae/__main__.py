from aaae.cli import main

main()
