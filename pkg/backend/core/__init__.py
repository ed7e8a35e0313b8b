# Numeric core for ArtiField
