import sys

from application import Application

# Create application instance
app_instance = Application()

if __name__ == '__main__':
    sys.exit(app_instance.run())
