"""API package"""


