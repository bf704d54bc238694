"""
homfem source modules
Declarative finite element solves and homogenization of periodic cells
"""
