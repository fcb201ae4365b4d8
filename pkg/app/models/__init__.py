# Grid fields, point configurations, test functions and pydantic schemas.
