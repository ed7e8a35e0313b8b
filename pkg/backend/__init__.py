# Backend package for ArtiField
