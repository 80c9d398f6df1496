# Artifact I/O, errors, seeding and report assessment
