"""Non-destructive interferometric characterisation of dipole-trapped atoms."""
