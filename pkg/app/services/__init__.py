"""Services package"""


