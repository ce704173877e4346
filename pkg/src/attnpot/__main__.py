from attnpot.cli import main

main()
