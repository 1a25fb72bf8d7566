# Init for engines
