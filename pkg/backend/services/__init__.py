# Services package for ArtiField
